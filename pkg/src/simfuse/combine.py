"""Multi-class combination of per-structure binary posteriors, plus Dice scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .grid import LabelMap, dice


@dataclass(frozen=True)
class PosteriorStack:
    """L per-structure foreground posteriors on a shared grid (layer i = structure i+1)."""

    layers: np.ndarray  # (L, nx, ny, nz), values in [0, 1]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        arr = np.asarray(self.layers, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"expected (L, nx, ny, nz) layers, got {arr.shape}")
        if arr.shape[0] < 1:
            raise DegenerateInputError("posterior stack has no layers")
        if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("posteriors must be finite and within [0, 1]")
        view = arr.view()
        view.flags.writeable = False
        object.__setattr__(self, "layers", view)

    @property
    def count(self) -> int:
        return self.layers.shape[0]


def combine(stack: PosteriorStack) -> LabelMap:
    """Per voxel: background when every posterior is below 0.5, else the
    1-based argmax; exact ties go to the smallest structure index."""
    best = stack.layers.max(axis=0)
    winner = stack.layers.argmax(axis=0).astype(np.int32) + 1
    out = np.where(best < 0.5, 0, winner).astype(np.uint8 if stack.count < 256 else np.int32)
    return LabelMap(out, stack.spacing)


def evaluate(pred: LabelMap, truth: LabelMap, structure_count: int) -> np.ndarray:
    """Per-structure Dice vector for structures 1..L."""
    if pred.dims != truth.dims:
        raise ShapeError(f"label map dims differ: {pred.dims} vs {truth.dims}")
    return np.array([dice(pred, truth, s) for s in range(1, structure_count + 1)])
