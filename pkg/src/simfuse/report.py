"""Dice evaluation reports: quartile tables as TSV/JSON and box-plot figures."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import ShapeError  # noqa: E402

_STATS = ("mean", "median", "q1", "q3", "min", "max")


@dataclass(frozen=True)
class EvaluationReport:
    """Per-image, per-structure Dice plus summary statistics."""

    method: str
    dice: np.ndarray  # (n_images, L)
    image_ids: tuple[str, ...]
    structure_names: dict[int, str]

    def __post_init__(self) -> None:
        arr = np.asarray(self.dice, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"expected (n_images, L) dice, got {arr.shape}")
        if arr.shape != (len(self.image_ids), len(self.structure_names)):
            raise ShapeError("dice shape does not match ids/structures")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("dice values must lie in [0, 1]")
        view = arr.view()
        view.flags.writeable = False
        object.__setattr__(self, "dice", view)

    def stats(self) -> dict[int, dict[str, float]]:
        out = {}
        for col, sid in enumerate(sorted(self.structure_names)):
            vals = self.dice[:, col]
            out[sid] = {
                "mean": float(vals.mean()),
                "median": float(np.median(vals)),
                "q1": float(np.percentile(vals, 25)),
                "q3": float(np.percentile(vals, 75)),
                "min": float(vals.min()),
                "max": float(vals.max()),
            }
        return out


def report(evals, method: str, *, image_ids=None,
           structure_names=None) -> EvaluationReport:
    """Bundle per-image Dice vectors into a report; all vectors must share L."""
    rows = [np.asarray(v, dtype=np.float64) for v in evals]
    if not rows:
        raise ValueError("need at least one evaluation")
    L = rows[0].shape[0]
    for i, r in enumerate(rows):
        if r.shape != (L,):
            raise ShapeError(f"evaluation {i} has {r.shape[0]} structures, expected {L}")
    if image_ids is None:
        image_ids = [f"img{i:03d}" for i in range(len(rows))]
    if structure_names is None:
        structure_names = {s: f"structure_{s:02d}" for s in range(1, L + 1)}
    return EvaluationReport(method, np.stack(rows), tuple(image_ids), dict(structure_names))


def save_report_tsv(rep: EvaluationReport, path) -> None:
    stats = rep.stats()
    lines = ["structure\tname\tn\t" + "\t".join(_STATS)]
    for sid in sorted(stats):
        row = stats[sid]
        cells = [str(sid), rep.structure_names[sid], str(len(rep.image_ids))]
        cells += [f"{row[s]:.6f}" for s in _STATS]
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def save_report_json(rep: EvaluationReport, path) -> None:
    doc = {
        "method": rep.method,
        "structures": {str(k): v for k, v in sorted(rep.structure_names.items())},
        "per_image": {
            iid: [float(v) for v in rep.dice[i]]
            for i, iid in enumerate(rep.image_ids)
        },
        "stats": {str(k): v for k, v in rep.stats().items()},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def save_report_figure(rep: EvaluationReport, path) -> None:
    """Box plot of per-image Dice for every structure."""
    sids = sorted(rep.structure_names)
    data = [rep.dice[:, i] for i in range(len(sids))]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(sids)), 4.0))
    ax.boxplot(data)
    ax.set_xticks(range(1, len(sids) + 1))
    ax.set_xticklabels([f"{s}\n{rep.structure_names[s]}" for s in sids])
    ax.set_ylabel("Dice")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(rep.method)
    ax.grid(axis="y", alpha=0.4)
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)
