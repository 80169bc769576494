"""Joint-histogram mutual information and the pairwise similarity matrix.

Similarity between two images for one structure is the plug-in mutual
information (in bits) of their intensities inside the structure's
bounding box. Binning is independent min-max linear per image, computed
on the cropped boxes, with the top edge inclusive.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, FormatError, ShapeError
from .grid import BoundingBox, Volume, crop

DEFAULT_BINS = 64


@dataclass(frozen=True)
class JointHistogram:
    """2D intensity histogram with the ranges used for binning."""

    counts: np.ndarray  # (bins, bins) int64
    n: int
    range_x: tuple[float, float]
    range_y: tuple[float, float]

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeError(f"counts must be square, got {counts.shape}")
        if int(counts.sum()) != self.n:
            raise ValueError("histogram counts do not sum to n")
        view = counts.view()
        view.flags.writeable = False
        object.__setattr__(self, "counts", view)

    @property
    def bins(self) -> int:
        return self.counts.shape[0]


def _bin_indices(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    # top edge inclusive; a constant image maps every sample to bin 0
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.intp)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.intp)
    return np.clip(idx, 0, bins - 1)


def _histogram_arrays(xv: np.ndarray, yv: np.ndarray, bins: int) -> JointHistogram:
    rx = (float(xv.min()), float(xv.max()))
    ry = (float(yv.min()), float(yv.max()))
    ix = _bin_indices(xv, rx[0], rx[1], bins)
    iy = _bin_indices(yv, ry[0], ry[1], bins)
    counts = np.bincount(ix * bins + iy, minlength=bins * bins).reshape(bins, bins)
    return JointHistogram(counts, int(xv.size), rx, ry)


def joint_histogram(x: Volume, y: Volume, bins: int = DEFAULT_BINS) -> JointHistogram:
    """Bin paired voxels of two same-shape volumes into a bins x bins table."""
    if x.dims != y.dims:
        raise ShapeError(f"volume dims differ: {x.dims} vs {y.dims}")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    return _histogram_arrays(x.voxels.ravel(order="F"), y.voxels.ravel(order="F"), bins)


def mutual_information(h: JointHistogram) -> float:
    """Plug-in MI estimate in bits; zero-count cells contribute nothing.

    Tiny negative rounding residue is clamped to 0.
    """
    if h.n <= 0:
        raise DegenerateInputError("empty joint histogram")
    p = h.counts / float(h.n)
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    nz = p > 0
    outer = np.outer(px, py)
    mi = float(np.sum(p[nz] * np.log2(p[nz] / outer[nz])))
    return max(mi, 0.0)


def structure_similarity(
    u: Volume, l: Volume, box: BoundingBox, bins: int = DEFAULT_BINS
) -> float:
    """MI between the bounding-box crops of two images, in bits."""
    return mutual_information(joint_histogram(crop(u, box), crop(l, box), bins))


@dataclass(frozen=True)
class SimilarityMatrix:
    """Symmetric pairwise similarity over the whole image set for one structure."""

    structure_id: int
    image_ids: tuple[str, ...]
    scores: np.ndarray  # (N, N) float64

    def __post_init__(self) -> None:
        ids = tuple(str(i) for i in self.image_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("image ids must be unique")
        scores = np.asarray(self.scores, dtype=np.float64)
        n = len(ids)
        if scores.shape != (n, n):
            raise ShapeError(f"scores shape {scores.shape} does not match {n} ids")
        view = scores.view()
        view.flags.writeable = False
        object.__setattr__(self, "image_ids", ids)
        object.__setattr__(self, "scores", view)

    def index(self, image_id: str) -> int:
        try:
            return self.image_ids.index(image_id)
        except ValueError:
            raise KeyError(f"unknown image id {image_id!r}") from None

    def score(self, a: str, b: str) -> float:
        return float(self.scores[self.index(a), self.index(b)])

    def save_tsv(self, path) -> None:
        """Write the full matrix as TSV with 9-significant-digit scores."""
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["id", *self.image_ids])
            for i, iid in enumerate(self.image_ids):
                w.writerow([iid, *(f"{v:.9g}" for v in self.scores[i])])

    @classmethod
    def load_tsv(cls, path, structure_id: int) -> "SimilarityMatrix":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh, delimiter="\t"))
        if not rows or rows[0][:1] != ["id"] or len(rows) != len(rows[0]):
            raise FormatError(f"{path}: malformed similarity TSV")
        ids = rows[0][1:]
        scores = np.empty((len(ids), len(ids)), dtype=np.float64)
        for i, row in enumerate(rows[1:]):
            if row[0] != ids[i] or len(row) != len(ids) + 1:
                raise FormatError(f"{path}: malformed similarity TSV row {i + 1}")
            scores[i] = [float(v) for v in row[1:]]
        return cls(structure_id, tuple(ids), scores)

    def save_meta(self, path, bins: int, box: BoundingBox) -> None:
        meta = {
            "structure_id": self.structure_id,
            "bins": bins,
            "bbox": {"lo": list(box.lo), "hi": list(box.hi)},
            "image_ids": list(self.image_ids),
        }
        Path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


# Worker state for the process pool; set once per worker by the initializer.
_WORKER_CROPS: list[np.ndarray] = []
_WORKER_BINS = DEFAULT_BINS


def _init_worker(crops, bins):
    global _WORKER_CROPS, _WORKER_BINS
    _WORKER_CROPS = crops
    _WORKER_BINS = bins


def _pair_mi(task):
    i, j = task
    h = _histogram_arrays(
        _WORKER_CROPS[i].ravel(order="F"),
        _WORKER_CROPS[j].ravel(order="F"),
        _WORKER_BINS,
    )
    return i, j, mutual_information(h)


def build_similarity_matrix(
    images,
    box: BoundingBox,
    bins: int = DEFAULT_BINS,
    *,
    image_ids=None,
    workers: int = 1,
) -> SimilarityMatrix:
    """Full symmetric MI matrix over all images inside one structure box.

    Every unordered pair (diagonal included) is computed exactly once and
    written to both cells, so symmetry is exact and the result does not
    depend on the worker count.
    """
    images = list(images)
    if len(images) < 2:
        raise ValueError("need at least two images")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if image_ids is None:
        image_ids = [f"img{i:03d}" for i in range(len(images))]
    ids = [str(i) for i in image_ids]
    if len(ids) != len(images):
        raise ValueError("image_ids length does not match images")
    dims = images[0].dims
    for iid, img in zip(ids, images):
        if img.dims != dims:
            raise ShapeError(f"image {iid!r} dims {img.dims} do not match {dims}")

    crops = [np.ascontiguousarray(crop(img, box).voxels) for img in images]
    n = len(images)
    tasks = [(i, j) for i in range(n) for j in range(i, n)]
    scores = np.empty((n, n), dtype=np.float64)

    def run(compute):
        for i, j in tasks:
            try:
                _, _, val = compute((i, j))
            except Exception as exc:
                raise RuntimeError(
                    f"similarity failed for pair ({ids[i]}, {ids[j]}): {exc}"
                ) from exc
            scores[i, j] = val
            scores[j, i] = val

    if workers <= 1:
        _init_worker(crops, bins)
        run(_pair_mi)
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(crops, bins)
        ) as pool:
            results = pool.map(_pair_mi, tasks, chunksize=8)
            run(lambda _t: next(results))
    return SimilarityMatrix(box.structure_id, tuple(ids), scores)
