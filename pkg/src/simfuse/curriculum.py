"""Similarity-ranked iterative pseudo-labeling.

Per structure: repeatedly pick the unlabeled image whose k-th highest
similarity to the current labeled pool is largest, fuse its k most
similar pool atlases with the locally weighted fuser, promote the fused
binary map into the pool, and continue until no unlabeled image remains.
Pseudo-labeled images become eligible atlases for later steps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .combine import PosteriorStack, combine
from .errors import InsufficientPoolError
from .fusion import FusionConfig, lop_fuse
from .grid import BoundingBox, LabelMap, Volume, dice
from .nifti import load_labels, load_volume
from .similarity import SimilarityMatrix


@dataclass(frozen=True)
class ImageRecord:
    id: str
    image_path: Path
    labels_path: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Image inventory: which ids exist, which carry expert labels.

    labels_path may exist for non-expert images (synthetic ground truth);
    the labeling loop never reads those, evaluation may.
    """

    images: tuple[ImageRecord, ...]
    expert_ids: tuple[str, ...]
    structure_names: dict[int, str]
    bboxes: dict[int, BoundingBox] | None = None

    def __post_init__(self) -> None:
        ids = [rec.id for rec in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError("image ids must be unique")
        by_id = {rec.id: rec for rec in self.images}
        for eid in self.expert_ids:
            rec = by_id.get(eid)
            if rec is None:
                raise ValueError(f"expert id {eid!r} not among images")
            if rec.labels_path is None:
                raise ValueError(f"expert id {eid!r} has no label map")
        if self.structure_count < 1:
            raise ValueError("need at least one structure")

    @property
    def structure_count(self) -> int:
        return len(self.structure_names)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(rec.id for rec in self.images)

    def record(self, image_id: str) -> ImageRecord:
        for rec in self.images:
            if rec.id == image_id:
                return rec
        raise KeyError(f"unknown image id {image_id!r}")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    root = path.parent

    def resolve(rel):
        return None if rel is None else (root / rel)

    images = tuple(
        ImageRecord(str(e["id"]), resolve(e["image"]), resolve(e.get("labels")))
        for e in doc["images"]
    )
    names = {int(k): str(v) for k, v in doc["structures"].items()}
    bboxes = None
    if doc.get("bboxes"):
        bboxes = {
            int(k): BoundingBox(tuple(v["lo"]), tuple(v["hi"]), int(k))
            for k, v in doc["bboxes"].items()
        }
    return DatasetManifest(images, tuple(doc["expert_labeled"]), names, bboxes)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    root = path.parent

    def rel(p):
        return None if p is None else p.relative_to(root).as_posix()

    doc = {
        "schema": "simfuse-manifest/1",
        "structures": {str(k): v for k, v in sorted(manifest.structure_names.items())},
        "expert_labeled": list(manifest.expert_ids),
        "images": [
            {"id": r.id, "image": rel(r.image_path), "labels": rel(r.labels_path)}
            for r in manifest.images
        ],
    }
    if manifest.bboxes:
        doc["bboxes"] = {
            str(k): {"lo": list(b.lo), "hi": list(b.hi)}
            for k, b in sorted(manifest.bboxes.items())
        }
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def kth_similarity(matrix: SimilarityMatrix, unlabeled_id: str, pool, k: int) -> float:
    """The k-th largest similarity between one unlabeled image and the pool."""
    pool = list(pool)
    if k < 1:
        raise ValueError("k must be positive")
    if k > len(pool):
        raise InsufficientPoolError(f"k={k} exceeds pool size {len(pool)}")
    vals = sorted((matrix.score(unlabeled_id, j) for j in pool), reverse=True)
    return vals[k - 1]


def select_next(matrix: SimilarityMatrix, unlabeled, pool, k: int) -> str:
    """Unlabeled image with the highest k-th pool similarity; ties pick the smallest id."""
    candidates = sorted(unlabeled)
    if not candidates:
        raise ValueError("no unlabeled images to select from")
    best_id = None
    best_val = -np.inf
    for uid in candidates:
        v = kth_similarity(matrix, uid, pool, k)
        if v > best_val:
            best_id, best_val = uid, v
    return best_id


def select_atlases(matrix: SimilarityMatrix, selected_id: str, pool, k: int) -> list[str]:
    """The k pool images most similar to the selected image, descending; ties by id."""
    pool = list(pool)
    if k > len(pool):
        raise InsufficientPoolError(f"k={k} exceeds pool size {len(pool)}")
    ranked = sorted(pool, key=lambda j: (-matrix.score(selected_id, j), j))
    return ranked[:k]


@dataclass(frozen=True)
class CurriculumStep:
    selected_id: str
    kth_similarity: float
    atlas_ids: tuple[str, ...]
    dice: float | None


@dataclass(frozen=True)
class CurriculumTrace:
    structure_id: int
    k: int
    steps: tuple[CurriculumStep, ...]
    error: str | None = None


@dataclass(frozen=True)
class PseudoLabelOutcome:
    traces: dict[int, CurriculumTrace]
    binary: dict[int, dict[str, LabelMap]]          # structure -> pseudo id -> map
    posteriors: dict[int, dict[str, np.ndarray]]    # float32 foreground posteriors
    combined: dict[str, LabelMap]                   # pseudo id -> multi-class map


def write_trace(trace: CurriculumTrace, path) -> None:
    with open(Path(path), "w") as fh:
        for i, s in enumerate(trace.steps):
            rec = {
                "step": i,
                "structure": trace.structure_id,
                "k": trace.k,
                "selected": s.selected_id,
                "kth_similarity": s.kth_similarity,
                "atlases": list(s.atlas_ids),
                "dice": s.dice,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if trace.error is not None:
            fh.write(json.dumps({"error": trace.error}, sort_keys=True) + "\n")


def read_trace(path, structure_id: int, k: int) -> CurriculumTrace:
    steps = []
    error = None
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        if "error" in rec:
            error = rec["error"]
            continue
        steps.append(CurriculumStep(rec["selected"], rec["kth_similarity"],
                                    tuple(rec["atlases"]), rec["dice"]))
    return CurriculumTrace(structure_id, k, tuple(steps), error)


def replay_selection(matrix: SimilarityMatrix, expert_ids, k: int):
    """Re-derive the (selected, atlases) sequence from a similarity matrix alone."""
    pool = set(expert_ids)
    unlabeled = set(matrix.image_ids) - pool
    sequence = []
    while unlabeled:
        sel = select_next(matrix, unlabeled, pool, k)
        atlases = select_atlases(matrix, sel, pool, k)
        sequence.append((sel, tuple(atlases)))
        pool.add(sel)
        unlabeled.discard(sel)
    return sequence


class _VolumeCache:
    """Lazy NIfTI loads so a big dataset is only pulled once per image."""

    def __init__(self, manifest: DatasetManifest):
        self._manifest = manifest
        self._volumes: dict[str, Volume] = {}
        self._labels: dict[str, LabelMap] = {}

    def volume(self, image_id: str) -> Volume:
        if image_id not in self._volumes:
            self._volumes[image_id] = load_volume(self._manifest.record(image_id).image_path)
        return self._volumes[image_id]

    def labels(self, image_id: str) -> LabelMap | None:
        rec = self._manifest.record(image_id)
        if rec.labels_path is None:
            return None
        if image_id not in self._labels:
            self._labels[image_id] = load_labels(rec.labels_path)
        return self._labels[image_id]


def pseudo_label_all(
    manifest: DatasetManifest,
    matrices: dict[int, SimilarityMatrix],
    k: int = 3,
    fusion: FusionConfig = FusionConfig(),
    *,
    order: str = "ranked",
    order_seed: int = 0,
    on_step=None,
) -> PseudoLabelOutcome:
    """Run the labeling loop for every structure and combine the results.

    order="random" replaces the ranked selection of the next image with a
    seeded uniform draw (ablation); atlas selection stays similarity-based.
    Per-structure loops are independent: a fusion failure ends that
    structure's loop (recorded on its trace) and the others continue.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(manifest.expert_ids) < k:
        raise InsufficientPoolError(
            f"need at least k={k} expert images, got {len(manifest.expert_ids)}"
        )
    if order not in ("ranked", "random"):
        raise ValueError(f"unknown order {order!r}")

    cache = _VolumeCache(manifest)
    expert_ids = list(manifest.expert_ids)
    all_ids = list(manifest.ids)
    traces: dict[int, CurriculumTrace] = {}
    binary: dict[int, dict[str, LabelMap]] = {}
    posteriors: dict[int, dict[str, np.ndarray]] = {}

    for sid in sorted(matrices):
        matrix = matrices[sid]
        pool_maps = {eid: cache.labels(eid).binary(sid) for eid in expert_ids}
        unlabeled = set(all_ids) - set(expert_ids)
        rng = np.random.Generator(np.random.Philox(key=[np.uint64(order_seed), np.uint64(sid)]))
        steps: list[CurriculumStep] = []
        error = None
        binary[sid] = {}
        posteriors[sid] = {}
        while unlabeled:
            pool = sorted(pool_maps)
            if order == "ranked":
                sel = select_next(matrix, unlabeled, pool, k)
            else:
                ordered = sorted(unlabeled)
                sel = ordered[int(rng.integers(len(ordered)))]
            ksim = kth_similarity(matrix, sel, pool, k)
            atlas_ids = select_atlases(matrix, sel, pool, k)
            try:
                fused = lop_fuse(
                    cache.volume(sel),
                    [(cache.volume(a), pool_maps[a]) for a in atlas_ids],
                    radius=fusion.radius, sigma=fusion.sigma,
                    max_iters=fusion.max_iters, tol=fusion.tol, prior=fusion.prior,
                )
            except Exception as exc:
                error = f"step {len(steps)} ({sel}): {exc}"
                break
            truth = cache.labels(sel)
            score = None if truth is None else dice(fused.hard_labels, truth.binary(sid), 1)
            steps.append(CurriculumStep(sel, ksim, tuple(atlas_ids), score))
            pool_maps[sel] = fused.hard_labels
            binary[sid][sel] = fused.hard_labels
            posteriors[sid][sel] = fused.posterior.astype(np.float32)
            unlabeled.discard(sel)
            if on_step is not None:
                on_step(sid, steps[-1])
        traces[sid] = CurriculumTrace(sid, k, tuple(steps), error)

    # Multi-class maps only make sense when every structure was processed:
    # layer index in the stack must equal the structure id.
    combined: dict[str, LabelMap] = {}
    sids = sorted(manifest.structure_names)
    if sorted(matrices) == sids and all_ids:
        spacing = cache.volume(all_ids[0]).spacing
        for iid in sorted(set(all_ids) - set(expert_ids)):
            if not all(iid in posteriors[s] for s in sids):
                continue  # a structure loop aborted before labeling this image
            stack = PosteriorStack(
                np.stack([posteriors[s][iid] for s in sids]).astype(np.float64), spacing
            )
            combined[iid] = combine(stack)
    return PseudoLabelOutcome(traces, binary, posteriors, combined)
