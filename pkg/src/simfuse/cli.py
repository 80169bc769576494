"""Command-line pipeline: phantom generation through evaluation.

Subcommands map 1:1 onto the library operations. All artifacts are
deterministic files; logs are JSON lines on stderr and are the only
place a timestamp appears. Long intermediates (bounding boxes,
similarity matrices) are first-class files: present ones are reused,
never silently recomputed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import curriculum, phantom
from .combine import PosteriorStack, combine, evaluate
from .errors import (
    BoundsError,
    DegenerateInputError,
    EmptyStructureError,
    FormatError,
    InsufficientPoolError,
    ShapeError,
    UnsupportedShapeError,
)
from .fusion import FusionConfig, lop_fuse, majority_vote, staple_em
from .grid import BoundingBox, LabelMap, Volume, structure_bbox
from .nifti import load_labels, load_volume, save_volume
from .report import report, save_report_figure, save_report_json, save_report_tsv
from .similarity import SimilarityMatrix, build_similarity_matrix

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_DATA_ERRORS = (
    FormatError,
    UnsupportedShapeError,
    ShapeError,
    BoundsError,
    EmptyStructureError,
    DegenerateInputError,
    InsufficientPoolError,
    ValueError,
    KeyError,
    OSError,
    json.JSONDecodeError,
)


class _UsageError(Exception):
    pass


class _NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _log(step: str, msg: str, level: str = "info", **metrics) -> None:
    rec = {
        "ts": datetime.now(timezone.utc).isoformat(timespec="milliseconds"),
        "level": level,
        "step": step,
        "msg": msg,
    }
    if metrics:
        rec["metrics"] = metrics
    print(json.dumps(rec, sort_keys=True), file=sys.stderr, flush=True)


@dataclass
class RunConfig:
    """Pipeline knobs; file config overrides defaults, flags override both."""

    k: int = 3
    bins: int = 64
    margin: int = 0
    radius: int = 1
    sigma: float | None = None
    max_iters: int = 100
    tol: float = 1e-6
    workers: int = 1
    seed: int = 0

    @classmethod
    def merge(cls, args: argparse.Namespace) -> "RunConfig":
        cfg = cls()
        path = getattr(args, "config", None)
        if path:
            doc = json.loads(Path(path).read_text())
            known = {f.name for f in fields(cls)}
            unknown = set(doc) - known
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
            for key, val in doc.items():
                setattr(cfg, key, val)
        for f in fields(cls):
            flag = getattr(args, f.name, None)
            if flag is not None:
                setattr(cfg, f.name, flag)
        if cfg.workers is None or cfg.workers == 0:
            cfg.workers = int(os.environ.get("SIMFUSE_WORKERS", "0")) or (os.cpu_count() or 1)
        if cfg.k < 2:
            raise ValueError("k must be at least 2")
        if cfg.bins < 2:
            raise ValueError("bins must be at least 2")
        return cfg

    def fusion(self) -> FusionConfig:
        return FusionConfig(radius=self.radius, sigma=self.sigma,
                            max_iters=self.max_iters, tol=self.tol)


def _structure_tag(sid: int) -> str:
    return f"structure_{sid:02d}"


def _parse_structures(manifest, spec: str | None) -> list[int]:
    all_sids = sorted(manifest.structure_names)
    if spec in (None, "all"):
        return all_sids
    sids = sorted({int(s) for s in spec.split(",")})
    for s in sids:
        if s not in manifest.structure_names:
            raise ValueError(f"unknown structure id {s}")
    return sids


def _apply_experts(manifest, count: int | None):
    if count is None:
        return manifest
    labeled = sorted(r.id for r in manifest.images if r.labels_path is not None)
    if count > len(labeled):
        raise ValueError(f"--experts {count} exceeds {len(labeled)} labeled images")
    return curriculum.DatasetManifest(
        manifest.images, tuple(labeled[:count]), manifest.structure_names, manifest.bboxes
    )


# ---------------------------------------------------------------- gen-phantom

def _cmd_gen_phantom(args) -> int:
    out = Path(args.out)
    spec = phantom.PhantomSpec(
        dims=tuple(args.dims),
        noise_sigma=args.noise,
        amplitude=args.amplitude,
        amplitude_max=args.amplitude_max,
        mode_amplitude=args.mode_amplitude,
        control_points=args.control_points,
        seed=args.seed,
    )
    _log("gen-phantom", "generating phantom dataset",
         n=args.n, seed=args.seed, out=str(out))
    subjects = phantom.generate(spec, args.n)
    ids = [f"subj{i:03d}" for i in range(args.n)]
    if args.duplicate_of is not None:
        if args.duplicate_of not in ids[:-1]:
            raise ValueError(f"--duplicate-of must name one of {ids[:-1][:5]}...")
        src = ids.index(args.duplicate_of)
        subjects[-1] = subjects[src]
        _log("gen-phantom", "injected duplicate subject",
             duplicate=ids[-1], source=args.duplicate_of)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    records = []
    for iid, (vol, lab) in zip(ids, subjects):
        save_volume(vol, out / "images" / f"{iid}.nii")
        save_volume(lab, out / "labels" / f"{iid}.nii")
        records.append(curriculum.ImageRecord(
            iid, out / "images" / f"{iid}.nii", out / "labels" / f"{iid}.nii"))
    experts = ids if args.experts is None else ids[: args.experts]
    names = {i + 1: f"structure_{i + 1:02d}" for i in range(len(spec.structures))}
    manifest = curriculum.DatasetManifest(tuple(records), tuple(experts), names)
    curriculum.save_manifest(manifest, out / "manifest.json")
    _log("gen-phantom", "dataset written", manifest=str(out / "manifest.json"))
    return EXIT_OK


# ----------------------------------------------------------------------- bbox

def _compute_bboxes(manifest, sids, margin: int) -> dict[int, BoundingBox]:
    expert_maps = [load_labels(manifest.record(e).labels_path)
                   for e in manifest.expert_ids]
    return {sid: structure_bbox(expert_maps, sid, margin) for sid in sids}


def _write_bboxes(boxes: dict[int, BoundingBox], margin: int, path: Path) -> None:
    doc = {
        "margin": margin,
        "boxes": {str(s): {"lo": list(b.lo), "hi": list(b.hi)}
                  for s, b in sorted(boxes.items())},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _read_bboxes(path: Path) -> dict[int, BoundingBox]:
    doc = json.loads(path.read_text())
    return {int(s): BoundingBox(tuple(v["lo"]), tuple(v["hi"]), int(s))
            for s, v in doc["boxes"].items()}


def _cmd_bbox(args) -> int:
    cfg = RunConfig.merge(args)
    manifest = _apply_experts(curriculum.load_manifest(args.manifest), args.experts)
    sids = _parse_structures(manifest, args.structures)
    boxes = _compute_bboxes(manifest, sids, cfg.margin)
    _write_bboxes(boxes, cfg.margin, Path(args.out))
    _log("bbox", "bounding boxes written", out=args.out,
         structures={str(s): list(boxes[s].shape) for s in sids})
    return EXIT_OK


# ----------------------------------------------------------------- similarity

def _similarity_paths(out_dir: Path, sid: int) -> tuple[Path, Path]:
    tag = _structure_tag(sid)
    return out_dir / f"{tag}.tsv", out_dir / f"{tag}.meta.json"


def _compute_similarity(manifest, boxes, sids, cfg, out_dir: Path
                        ) -> dict[int, SimilarityMatrix]:
    """Build (or reuse) per-structure TSV matrices; always returns the
    file-backed values so downstream ranking matches the persisted bytes."""
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = list(manifest.ids)
    volumes = None
    matrices = {}
    for sid in sids:
        tsv, meta = _similarity_paths(out_dir, sid)
        if not tsv.exists():
            if volumes is None:
                volumes = [load_volume(r.image_path) for r in manifest.images]
            _log("similarity", "computing matrix", structure=sid,
                 images=len(ids), bins=cfg.bins, workers=cfg.workers)
            m = build_similarity_matrix(volumes, boxes[sid], cfg.bins,
                                        image_ids=ids, workers=cfg.workers)
            m.save_tsv(tsv)
            m.save_meta(meta, cfg.bins, boxes[sid])
        else:
            _log("similarity", "reusing matrix", structure=sid, path=str(tsv))
        matrices[sid] = SimilarityMatrix.load_tsv(tsv, sid)
    return matrices


def _cmd_similarity(args) -> int:
    cfg = RunConfig.merge(args)
    manifest = _apply_experts(curriculum.load_manifest(args.manifest), args.experts)
    sids = _parse_structures(manifest, args.structures)
    if args.bboxes and Path(args.bboxes).exists():
        boxes = _read_bboxes(Path(args.bboxes))
    elif manifest.bboxes:
        boxes = manifest.bboxes
    else:
        boxes = _compute_bboxes(manifest, sids, cfg.margin)
        if args.bboxes:
            _write_bboxes(boxes, cfg.margin, Path(args.bboxes))
    _compute_similarity(manifest, boxes, sids, cfg, Path(args.out))
    return EXIT_OK


# --------------------------------------------------------------- pseudo-label

def _cmd_pseudo_label(args) -> int:
    cfg = RunConfig.merge(args)
    out = Path(args.out)
    manifest = _apply_experts(curriculum.load_manifest(args.manifest), args.experts)
    sids = _parse_structures(manifest, args.structures)

    bbox_path = out / "bboxes.json"
    if manifest.bboxes:
        boxes = manifest.bboxes
    elif bbox_path.exists():
        boxes = _read_bboxes(bbox_path)
        _log("bbox", "reusing bounding boxes", path=str(bbox_path))
    else:
        boxes = _compute_bboxes(manifest, sids, cfg.margin)
        _write_bboxes(boxes, cfg.margin, bbox_path)
        _log("bbox", "bounding boxes computed", path=str(bbox_path))

    matrices = _compute_similarity(manifest, boxes, sids, cfg, out / "similarity")

    def on_step(sid, step):
        _log("pseudo-label", "labeled image", structure=sid,
             selected=step.selected_id, kth_similarity=step.kth_similarity,
             atlases=list(step.atlas_ids), dice=step.dice)

    outcome = curriculum.pseudo_label_all(
        manifest, matrices, cfg.k, cfg.fusion(),
        order=args.order, order_seed=cfg.seed, on_step=on_step,
    )

    (out / "trace").mkdir(parents=True, exist_ok=True)
    for sid, trace in outcome.traces.items():
        curriculum.write_trace(trace, out / "trace" / f"{_structure_tag(sid)}.jsonl")
        for iid, lab in sorted(outcome.binary[sid].items()):
            d = out / _structure_tag(sid)
            d.mkdir(parents=True, exist_ok=True)
            save_volume(lab, d / f"{iid}.nii")
        pdir = out / "posteriors" / _structure_tag(sid)
        pdir.mkdir(parents=True, exist_ok=True)
        spacing = load_volume(manifest.record(manifest.ids[0]).image_path).spacing
        for iid, post in sorted(outcome.posteriors[sid].items()):
            save_volume(Volume(post.astype(np.float64), spacing), pdir / f"{iid}.nii")
    cdir = out / "combined"
    cdir.mkdir(parents=True, exist_ok=True)
    for iid, lab in sorted(outcome.combined.items()):
        save_volume(lab, cdir / f"{iid}.nii")

    failed = {sid: t.error for sid, t in outcome.traces.items() if t.error}
    for sid, err in failed.items():
        _log("pseudo-label", "structure loop aborted", level="error",
             structure=sid, error=err)

    # closed-loop Dice report over pseudo-labeled images with known truth
    scored = [iid for iid in sorted(outcome.combined)
              if manifest.record(iid).labels_path is not None]
    if scored:
        L = manifest.structure_count
        evals = [evaluate(outcome.combined[iid],
                          load_labels(manifest.record(iid).labels_path), L)
                 for iid in scored]
        rep = report(evals, "pseudo-label", image_ids=scored,
                     structure_names=manifest.structure_names)
        rdir = out / "report"
        rdir.mkdir(parents=True, exist_ok=True)
        save_report_tsv(rep, rdir / "dice.tsv")
        save_report_json(rep, rdir / "dice.json")
        means = {str(s): v["mean"] for s, v in rep.stats().items()}
        _log("pseudo-label", "dice report written", mean_dice=means)
    if failed:
        raise _NumericError(f"structure loops aborted: {failed}")
    return EXIT_OK


# ----------------------------------------------------------------------- fuse

def _cmd_fuse(args) -> int:
    cfg = RunConfig.merge(args)
    if len(args.atlas_image) != len(args.atlas_labels):
        raise ValueError("--atlas-image and --atlas-labels must pair up")
    labels = [load_labels(p) for p in args.atlas_labels]
    if args.structure is not None:
        labels = [lab.binary(args.structure) for lab in labels]
    _log("fuse", "fusing atlases", method=args.method, atlases=len(labels))
    if args.method == "mv":
        result = majority_vote(labels)
    elif args.method == "staple":
        result = staple_em(labels, max_iters=cfg.max_iters, tol=cfg.tol,
                           prior=args.prior)
    else:
        target = load_volume(args.target)
        images = [load_volume(p) for p in args.atlas_image]
        result = lop_fuse(target, list(zip(images, labels)),
                          radius=cfg.radius, sigma=cfg.sigma,
                          max_iters=cfg.max_iters, tol=cfg.tol, prior=args.prior)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spacing = labels[0].spacing
    save_volume(Volume(result.posterior, spacing), out / "posterior.nii")
    save_volume(result.hard_labels, out / "labels.nii")
    doc = {
        "method": args.method,
        "iterations": result.iterations,
        "converged": result.converged,
        "degenerate": result.degenerate,
        "raters": [{"sensitivity": r.sensitivity, "specificity": r.specificity}
                   for r in result.raters],
        "log_likelihood": list(result.log_likelihoods),
    }
    (out / "fusion.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    _log("fuse", "fusion written", out=str(out), iterations=result.iterations,
         converged=result.converged)
    if args.require_converged and not result.converged:
        raise _NumericError(f"EM did not converge within {cfg.max_iters} iterations")
    return EXIT_OK


# -------------------------------------------------------------------- combine

def _cmd_combine(args) -> int:
    vols = [load_volume(p) for p in args.posteriors]
    stack = PosteriorStack(np.stack([v.voxels for v in vols]), vols[0].spacing)
    save_volume(combine(stack), args.out)
    _log("combine", "combined map written", out=args.out, layers=stack.count)
    return EXIT_OK


# ------------------------------------------------------------------- evaluate

def _cmd_evaluate(args) -> int:
    manifest = curriculum.load_manifest(args.manifest)
    pred_dir = Path(args.pred_dir)
    L = manifest.structure_count
    ids, evals = [], []
    for rec in manifest.images:
        pred_path = pred_dir / f"{rec.id}.nii"
        if rec.labels_path is None or not pred_path.exists():
            continue
        evals.append(evaluate(load_labels(pred_path), load_labels(rec.labels_path), L))
        ids.append(rec.id)
    if not ids:
        raise ValueError(f"no images have both truth labels and {pred_dir}/<id>.nii")
    rep = report(evals, args.method, image_ids=ids,
                 structure_names=manifest.structure_names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_report_tsv(rep, out / "dice.tsv")
    save_report_json(rep, out / "dice.json")
    save_report_figure(rep, out / "dice.png")
    means = {str(s): v["mean"] for s, v in rep.stats().items()}
    _log("evaluate", "report written", out=str(out), images=len(ids), mean_dice=means)
    return EXIT_OK


# --------------------------------------------------------------------- parser

def _add_config_flags(p: _Parser, *names: str) -> None:
    opts = {
        "k": dict(type=int, help="similarity rank / atlas count (default 3)"),
        "bins": dict(type=int, help="histogram bins (default 64)"),
        "margin": dict(type=int, help="bbox margin voxels (default 0)"),
        "radius": dict(type=int, help="patch radius for local weights (default 1)"),
        "sigma": dict(type=float, help="weight kernel sigma (default: auto)"),
        "max-iters": dict(type=int, dest="max_iters", help="EM iteration cap"),
        "tol": dict(type=float, help="EM convergence tolerance"),
        "workers": dict(type=int, help="worker processes (0 = all cores)"),
        "seed": dict(type=int, help="seed for randomized choices"),
    }
    for name in names:
        p.add_argument(f"--{name}", default=None, **opts[name])
    p.add_argument("--config", default=None, help="JSON config file (flags win)")


def build_parser() -> _Parser:
    parser = _Parser(prog="simfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="write a synthetic dataset + manifest")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, nargs=3, default=[64, 64, 64])
    p.add_argument("--noise", type=float, default=5.0)
    p.add_argument("--amplitude", type=float, default=2.0)
    p.add_argument("--amplitude-max", type=float, default=None)
    p.add_argument("--mode-amplitude", type=float, default=0.0,
                   help="shared deformation mode scaled by subject index/(n-1)")
    p.add_argument("--control-points", type=int, default=8)
    p.add_argument("--experts", type=int, default=None,
                   help="mark only the first N subjects as expert labeled")
    p.add_argument("--duplicate-of", default=None,
                   help="make the last subject an exact copy of this id")
    p.set_defaults(func=_cmd_gen_phantom)

    p = sub.add_parser("bbox", help="per-structure bounding boxes from expert labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--structures", default="all")
    p.add_argument("--experts", type=int, default=None)
    _add_config_flags(p, "margin")
    p.set_defaults(func=_cmd_bbox)

    p = sub.add_parser("similarity", help="pairwise similarity matrices (TSV)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bboxes", default=None, help="bbox JSON (computed if absent)")
    p.add_argument("--structures", default="all")
    p.add_argument("--experts", type=int, default=None)
    _add_config_flags(p, "bins", "margin", "workers")
    p.set_defaults(func=_cmd_similarity)

    p = sub.add_parser("pseudo-label", help="similarity-ranked labeling loop")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--structures", default="all")
    p.add_argument("--experts", type=int, default=None)
    p.add_argument("--order", choices=("ranked", "random"), default="ranked")
    _add_config_flags(p, "k", "bins", "margin", "radius", "sigma",
                      "max-iters", "tol", "workers", "seed")
    p.set_defaults(func=_cmd_pseudo_label)

    p = sub.add_parser("fuse", help="fuse explicit atlases onto one target")
    p.add_argument("--method", choices=("mv", "staple", "lop"), required=True)
    p.add_argument("--target", default=None, help="target image (lop only)")
    p.add_argument("--atlas-image", action="append", default=[])
    p.add_argument("--atlas-labels", action="append", required=True)
    p.add_argument("--structure", type=int, default=None,
                   help="binarize multi-class atlas labels to this structure")
    p.add_argument("--prior", type=float, default=None)
    p.add_argument("--require-converged", action="store_true")
    p.add_argument("--out", required=True)
    _add_config_flags(p, "radius", "sigma", "max-iters", "tol")
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("combine", help="combine binary posteriors into multi-class")
    p.add_argument("--posteriors", nargs="+", required=True,
                   help="posterior volumes ordered structure 1..L")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_combine)

    p = sub.add_parser("evaluate", help="Dice report (TSV/JSON + box plot)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--method", default="prediction", help="label for the report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "fuse" and args.method == "lop" and not args.target:
            raise _UsageError("simfuse fuse: --target is required for --method lop")
        return args.func(args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except _NumericError as exc:
        _log("simfuse", str(exc), level="error")
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        _log("simfuse", f"{type(exc).__name__}: {exc}", level="error")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
