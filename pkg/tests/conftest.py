"""Shared fixtures: tiny grids and on-disk phantom datasets."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

import simfuse as sf
from simfuse import curriculum


def volume_from(values) -> sf.Volume:
    return sf.Volume(np.asarray(values, dtype=np.float64))


def labels_from(values) -> sf.LabelMap:
    return sf.LabelMap(np.asarray(values, dtype=np.uint8))


def small_spec(seed: int = 0, **kw) -> sf.PhantomSpec:
    """24^3 two-structure scene for fast tests."""
    return sf.PhantomSpec(
        dims=(24, 24, 24),
        structures=(
            sf.Ellipsoid((8.0, 8.0, 8.0), (4.0, 5.0, 4.0), 50.0),
            sf.Ellipsoid((16.0, 16.0, 16.0), (4.0, 4.0, 5.0), 110.0),
        ),
        amplitude=1.0,
        noise_sigma=3.0,
        seed=seed,
        **kw,
    )


def make_dataset(root: Path, spec: sf.PhantomSpec, n: int, experts: int,
                 duplicate_of: str | None = None) -> curriculum.DatasetManifest:
    """Write a phantom dataset (all subjects carry truth labels) and return
    its manifest with the first ``experts`` ids marked expert-labeled."""
    subjects = sf.generate(spec, n)
    ids = [f"subj{i:03d}" for i in range(n)]
    if duplicate_of is not None:
        subjects[-1] = subjects[ids.index(duplicate_of)]
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    records = []
    for iid, (vol, lab) in zip(ids, subjects):
        sf.save_volume(vol, root / "images" / f"{iid}.nii")
        sf.save_volume(lab, root / "labels" / f"{iid}.nii")
        records.append(curriculum.ImageRecord(
            iid, root / "images" / f"{iid}.nii", root / "labels" / f"{iid}.nii"))
    names = {s + 1: f"structure_{s + 1:02d}" for s in range(len(spec.structures))}
    manifest = curriculum.DatasetManifest(tuple(records), tuple(ids[:experts]), names)
    curriculum.save_manifest(manifest, root / "manifest.json")
    return manifest


@pytest.fixture(scope="session")
def phantom_trio():
    """Three default-spec subjects, reused by read-only tests."""
    return sf.generate(sf.PhantomSpec(seed=5), 3)
