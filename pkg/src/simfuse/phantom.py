"""Deterministic synthetic phantoms with exact ground-truth labels.

Subjects are a fixed multi-ellipsoid scene warped by a smooth random
displacement field (low-resolution control lattice upsampled by
trilinear interpolation) with additive Gaussian intensity noise. Labels
are warped with nearest-neighbor backward sampling, so every subject
carries exact ground truth and structures can never overlap.

Randomness comes from the counter-based Philox generator keyed by
(seed, subject index), so any subject can be regenerated independently
and results are reproducible for a fixed numpy version.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import LabelMap, Volume


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float


DEFAULT_STRUCTURES = (
    Ellipsoid(center=(18.0, 20.0, 22.0), radii=(10.0, 11.0, 9.0), intensity=40.0),
    Ellipsoid(center=(45.0, 40.0, 24.0), radii=(9.0, 8.0, 10.0), intensity=80.0),
    Ellipsoid(center=(30.0, 44.0, 46.0), radii=(8.0, 9.0, 8.0), intensity=120.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    """Scene geometry plus deformation/noise settings and the base seed.

    amplitude_max, when set, ramps the per-subject deformation amplitude
    linearly from ``amplitude`` (subject 0) to ``amplitude_max`` (last
    subject), giving the set a difficulty gradient.

    mode_amplitude adds a deformation mode shared by the whole dataset:
    one extra random field, scaled per subject by index/(n-1). Subjects
    then lie along a one-dimensional anatomical continuum with the
    low-index subjects at the undeformed end, which is the regime where
    labeling order genuinely matters.
    """

    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    structures: tuple[Ellipsoid, ...] = DEFAULT_STRUCTURES
    background: float = 10.0
    noise_sigma: float = 5.0
    amplitude: float = 2.0
    amplitude_max: float | None = None
    mode_amplitude: float = 0.0
    control_points: int = 8
    seed: int = 0


@dataclass(frozen=True)
class RaterSpec:
    """Simulated rater with independent voxelwise error rates."""

    sensitivity: float
    specificity: float
    seed: int

    def __post_init__(self) -> None:
        for name in ("sensitivity", "specificity"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(stream)]))


def base_scene(spec: PhantomSpec) -> np.ndarray:
    """Paint the undeformed label scene; raises if structures overlap."""
    nx, ny, nz = spec.dims
    X, Y, Z = np.ogrid[0:nx, 0:ny, 0:nz]
    labels = np.zeros(spec.dims, dtype=np.uint8)
    for sid, e in enumerate(spec.structures, start=1):
        cx, cy, cz = e.center
        rx, ry, rz = e.radii
        mask = ((X - cx) / rx) ** 2 + ((Y - cy) / ry) ** 2 + ((Z - cz) / rz) ** 2 <= 1.0
        if np.any(labels[mask]):
            raise ValueError(f"structure {sid} overlaps an earlier structure")
        labels[mask] = sid
    return labels


def min_structure_gap(labels: np.ndarray) -> float:
    """Smallest voxel distance between any two distinct structures."""
    sids = [int(s) for s in np.unique(labels) if s != 0]
    gap = np.inf
    for s in sids:
        dist = ndimage.distance_transform_edt(labels != s)
        for t in sids:
            if t <= s:
                continue
            gap = min(gap, float(dist[labels == t].min()))
    return gap


def validate_spec(spec: PhantomSpec) -> np.ndarray:
    """Check the non-overlap and amplitude invariants; returns the base scene."""
    if any(d < 2 for d in spec.dims):
        raise ValueError("dims must be at least 2 per axis")
    if spec.control_points < 2:
        raise ValueError("control_points must be >= 2")
    if spec.amplitude < 0 or (spec.amplitude_max or 0) < 0 or spec.mode_amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    labels = base_scene(spec)
    amp = max(spec.amplitude, spec.amplitude_max or 0.0) + spec.mode_amplitude
    if len(spec.structures) > 1 and amp > 0:
        gap = min_structure_gap(labels)
        if amp >= gap / 2.0:
            raise ValueError(
                f"total displacement bound {amp} must stay below half the "
                f"minimum inter-structure gap ({gap:.2f} voxels)"
            )
    return labels


def _displacement(rng: np.random.Generator, dims, control_points: int,
                  amplitude: float) -> list[np.ndarray]:
    cp = control_points
    control = rng.uniform(-amplitude, amplitude, size=(3, cp, cp, cp))
    coords = np.meshgrid(
        *(np.linspace(0.0, cp - 1.0, d) for d in dims), indexing="ij"
    )
    return [ndimage.map_coordinates(control[c], coords, order=1, mode="nearest")
            for c in range(3)]


def _warp_labels(base: np.ndarray, disp: list[np.ndarray]) -> np.ndarray:
    nx, ny, nz = base.shape
    X, Y, Z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    src = [X - disp[0], Y - disp[1], Z - disp[2]]
    return ndimage.map_coordinates(base, src, order=0, mode="nearest")


def subject_amplitude(spec: PhantomSpec, index: int, n: int) -> float:
    if spec.amplitude_max is None or n <= 1:
        return spec.amplitude
    frac = index / (n - 1)
    return spec.amplitude + frac * (spec.amplitude_max - spec.amplitude)


_MODE_STREAM = 0xFFFFFFFF  # Philox stream for the shared mode; subjects use 0..n-1


def _mode_field(spec: PhantomSpec) -> list[np.ndarray] | None:
    if spec.mode_amplitude <= 0.0:
        return None
    rng = _rng(spec.seed, _MODE_STREAM)
    return _displacement(rng, spec.dims, spec.control_points, spec.mode_amplitude)


def generate_subject(spec: PhantomSpec, base: np.ndarray, index: int, n: int,
                     mode: list[np.ndarray] | None = None) -> tuple[Volume, LabelMap]:
    """One deterministic subject: warped labels plus noisy painted image."""
    rng = _rng(spec.seed, index)
    amp = subject_amplitude(spec, index, n)
    t = 0.0 if n <= 1 else index / (n - 1)
    sids = np.arange(1, len(spec.structures) + 1)
    labels = base
    for attempt in range(5):
        if amp == 0.0 and mode is None:
            labels = base.copy()
            break
        disp = _displacement(rng, spec.dims, spec.control_points, amp) \
            if amp > 0.0 else [0.0, 0.0, 0.0]
        if mode is not None:
            disp = [d + t * m for d, m in zip(disp, mode)]
        labels = _warp_labels(base, disp)
        if np.isin(sids, labels).all():
            break
        amp *= 0.5  # a structure vanished; damp and redraw
    else:
        raise RuntimeError(f"subject {index}: structure lost after 5 damped retries")
    means = np.array([spec.background] + [e.intensity for e in spec.structures])
    img = means[labels]
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    return Volume(img, spec.spacing), LabelMap(labels.astype(np.uint8), spec.spacing)


def generate(spec: PhantomSpec, n: int) -> list[tuple[Volume, LabelMap]]:
    """Generate n subjects; deterministic per (spec.seed, subject index, n)."""
    if n < 1:
        raise ValueError("n must be positive")
    base = validate_spec(spec)
    mode = _mode_field(spec)
    return [generate_subject(spec, base, i, n, mode) for i in range(n)]


def simulate_raters(truth: LabelMap, raters) -> list[LabelMap]:
    """Independent binary raters over a binary truth map.

    Each rater keeps a true-foreground voxel with probability
    ``sensitivity`` and keeps a true-background voxel as background with
    probability ``specificity``.
    """
    raters = list(raters)
    if not raters:
        raise ValueError("need at least one rater")
    if truth.labels.max() > 1:
        raise ValueError("truth must be binary")
    fg = truth.labels == 1
    out = []
    for r in raters:
        u = _rng(r.seed, 0).random(truth.dims)
        votes = np.where(fg, u < r.sensitivity, u < 1.0 - r.specificity)
        out.append(LabelMap(votes.astype(np.uint8), truth.spacing))
    return out
