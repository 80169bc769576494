"""Dense 3D grid types shared by every stage of the pipeline.

Arrays are indexed ``[x, y, z]`` and the linear (on-disk) order is
x-fastest. Instances are frozen and expose read-only arrays, so they can
be shared freely across parallel workers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, EmptyStructureError, ShapeError

Index3 = tuple[int, int, int]


def _readonly(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


def _check_spacing(spacing) -> tuple[float, float, float]:
    vals = tuple(float(s) for s in spacing)
    if len(vals) != 3 or any(s <= 0 or not np.isfinite(s) for s in vals):
        raise ValueError(f"spacing must be 3 positive reals, got {spacing!r}")
    return vals


@dataclass(frozen=True)
class Volume:
    """Scalar intensity grid with voxel spacing in mm."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        arr = np.asarray(self.voxels)
        if arr.ndim != 3 or any(d < 1 for d in arr.shape):
            raise ShapeError(f"expected a non-empty 3D array, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise ValueError("volume intensities must be finite (no NaN/Inf)")
        object.__setattr__(self, "voxels", _readonly(arr))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Index3:
        return self.voxels.shape


@dataclass(frozen=True)
class LabelMap:
    """Integer structure labels on the same grid convention as Volume.

    0 is background; structures are numbered 1..L.
    """

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        arr = np.asarray(self.labels)
        if arr.ndim != 3 or any(d < 1 for d in arr.shape):
            raise ShapeError(f"expected a non-empty 3D array, got shape {arr.shape}")
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {arr.dtype}")
        if arr.size and int(arr.min()) < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "labels", _readonly(arr))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Index3:
        return self.labels.shape

    def binary(self, structure_id: int) -> "LabelMap":
        """Binarize to {0,1} for one structure."""
        return LabelMap((self.labels == structure_id).astype(np.uint8), self.spacing)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned inclusive voxel-index box for one structure."""

    lo: Index3
    hi: Index3
    structure_id: int

    def __post_init__(self) -> None:
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("lo and hi must be 3 voxel indices")
        if any(l < 0 for l in lo) or any(h < l for l, h in zip(lo, hi)):
            raise ValueError(f"invalid box lo={lo} hi={hi}")
        if self.structure_id < 1:
            raise ValueError("structure_id must be a positive integer")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self) -> Index3:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    def fits(self, dims: Index3) -> bool:
        return all(h < d for h, d in zip(self.hi, dims))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))


def crop(obj: Volume | LabelMap, box: BoundingBox):
    """Extract the sub-grid covered by an inclusive bounding box."""
    if not box.fits(obj.dims):
        raise BoundsError(f"box hi={box.hi} exceeds grid dims {obj.dims}")
    sl = box.slices()
    if isinstance(obj, Volume):
        return Volume(obj.voxels[sl].copy(), obj.spacing)
    return LabelMap(obj.labels[sl].copy(), obj.spacing)


def structure_bbox(maps, structure_id: int, margin: int = 0) -> BoundingBox:
    """Tightest box enclosing a structure across all maps, dilated by margin.

    The box covers every voxel labeled ``structure_id`` in any of the
    maps, grown by ``margin`` voxels per face and clamped to the grid.
    Raises EmptyStructureError when the structure appears nowhere.
    """
    maps = list(maps)
    if not maps:
        raise ValueError("need at least one label map")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    dims = maps[0].dims
    lo = None
    hi = None
    for m in maps:
        if m.dims != dims:
            raise ShapeError(f"label map dims {m.dims} do not match {dims}")
        idx = np.nonzero(m.labels == structure_id)
        if idx[0].size == 0:
            continue
        mins = tuple(int(ax.min()) for ax in idx)
        maxs = tuple(int(ax.max()) for ax in idx)
        if lo is None:
            lo, hi = mins, maxs
        else:
            lo = tuple(min(a, b) for a, b in zip(lo, mins))
            hi = tuple(max(a, b) for a, b in zip(hi, maxs))
    if lo is None:
        raise EmptyStructureError(f"structure {structure_id} absent from every map")
    lo = tuple(max(0, l - margin) for l in lo)
    hi = tuple(min(d - 1, h + margin) for h, d in zip(hi, dims))
    return BoundingBox(lo, hi, structure_id)


def dice(a: LabelMap, b: LabelMap, structure_id: int) -> float:
    """Dice overlap 2|A&B| / (|A|+|B|) for one structure; 1.0 when both empty."""
    if a.dims != b.dims:
        raise ShapeError(f"label map dims differ: {a.dims} vs {b.dims}")
    fa = a.labels == structure_id
    fb = b.labels == structure_id
    na = int(fa.sum())
    nb = int(fb.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(fa, fb).sum())
    return 2.0 * inter / (na + nb)
