import json

import numpy as np
import pytest

import simfuse as sf
from simfuse import curriculum
from simfuse.errors import InsufficientPoolError

from conftest import make_dataset, small_spec


def matrix_from(ids, rows):
    return sf.SimilarityMatrix(1, tuple(ids), np.array(rows, dtype=np.float64))


@pytest.fixture
def toy_matrix():
    # symmetric 4x4 over ids a..d
    ids = ["a", "b", "c", "d"]
    m = np.array([
        [9.0, 0.9, 0.7, 0.5],
        [0.9, 9.0, 0.2, 0.8],
        [0.7, 0.2, 9.0, 0.6],
        [0.5, 0.8, 0.6, 9.0],
    ])
    return matrix_from(ids, m)


class TestSelection:
    def test_kth_similarity(self, toy_matrix):
        # row a over pool {b, c, d}: sims 0.9, 0.7, 0.5
        assert curriculum.kth_similarity(toy_matrix, "a", ["b", "c", "d"], 3) == 0.5
        assert curriculum.kth_similarity(toy_matrix, "a", ["b", "c", "d"], 1) == 0.9

    def test_kth_exceeds_pool(self, toy_matrix):
        with pytest.raises(InsufficientPoolError):
            curriculum.kth_similarity(toy_matrix, "a", ["b", "c"], 3)

    def test_select_next_highest_kth(self, toy_matrix):
        # pool {c, d}; candidates a (2nd sim 0.5) and b (2nd sim 0.2)
        got = curriculum.select_next(toy_matrix, {"a", "b"}, ["c", "d"], 2)
        assert got == "a"

    def test_select_next_tie_lexicographic(self):
        ids = ["a", "b", "p"]
        m = np.array([
            [9.0, 0.4, 0.4],
            [0.4, 9.0, 0.4],
            [0.4, 0.4, 9.0],
        ])
        got = curriculum.select_next(matrix_from(ids, m), {"a", "b"}, ["p"], 1)
        assert got == "a"

    def test_select_atlases_ranked(self, toy_matrix):
        # row a: b 0.9, c 0.7, d 0.5
        assert curriculum.select_atlases(toy_matrix, "a", ["b", "c", "d"], 2) == ["b", "c"]
        assert curriculum.select_atlases(toy_matrix, "a", ["b", "c", "d"], 3) == ["b", "c", "d"]
        assert curriculum.select_atlases(toy_matrix, "a", ["d"], 1) == ["d"]

    def test_select_atlases_tie_by_id(self):
        ids = ["t", "x", "y"]
        m = np.array([
            [9.0, 0.5, 0.5],
            [0.5, 9.0, 0.1],
            [0.5, 0.1, 9.0],
        ])
        assert curriculum.select_atlases(matrix_from(ids, m), "t", ["y", "x"], 2) == ["x", "y"]

    def test_near_duplicate_selected_first(self):
        # c is nearly identical to pool image p; d is far from everything
        ids = ["c", "d", "p", "q"]
        m = np.array([
            [9.0, 0.1, 5.0, 0.6],
            [0.1, 9.0, 0.3, 0.2],
            [5.0, 0.3, 9.0, 0.7],
            [0.6, 0.2, 0.7, 9.0],
        ])
        mat = matrix_from(ids, m)
        assert curriculum.select_next(mat, {"c", "d"}, ["p", "q"], 2) == "c"
        seq = curriculum.replay_selection(mat, ["p", "q"], 2)
        assert seq[0][0] == "c"


class TestManifest:
    def test_roundtrip(self, tmp_path):
        manifest = make_dataset(tmp_path, small_spec(seed=0), 3, 2)
        back = curriculum.load_manifest(tmp_path / "manifest.json")
        assert back.ids == manifest.ids
        assert back.expert_ids == manifest.expert_ids
        assert back.structure_names == manifest.structure_names
        assert back.record("subj000").image_path.exists()

    def test_expert_must_have_labels(self):
        rec = curriculum.ImageRecord("x", None, None)
        with pytest.raises(ValueError):
            curriculum.DatasetManifest((rec,), ("x",), {1: "s"})

    def test_unique_ids(self):
        rec = curriculum.ImageRecord("x", None, None)
        with pytest.raises(ValueError):
            curriculum.DatasetManifest((rec, rec), (), {1: "s"})


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """6-subject dataset (3 experts) with the last subject duplicating an
    expert, plus its matrices and a completed ranked run."""
    root = tmp_path_factory.mktemp("smallrun")
    spec = sf.PhantomSpec(seed=21, amplitude=1.5)
    manifest = make_dataset(root, spec, 6, 3, duplicate_of="subj001")
    expert_maps = [sf.load_labels(manifest.record(e).labels_path)
                   for e in manifest.expert_ids]
    vols = [sf.load_volume(r.image_path) for r in manifest.images]
    matrices = {}
    for sid in sorted(manifest.structure_names):
        box = sf.structure_bbox(expert_maps, sid, margin=3)
        matrices[sid] = sf.build_similarity_matrix(vols, box, 64,
                                                   image_ids=list(manifest.ids))
    outcome = curriculum.pseudo_label_all(manifest, matrices, 3, sf.FusionConfig())
    return manifest, matrices, outcome


class TestPseudoLabelAll:
    def test_no_unlabeled_is_a_noop(self, tmp_path):
        manifest = make_dataset(tmp_path, small_spec(seed=1), 3, 3)
        vols = [sf.load_volume(r.image_path) for r in manifest.images]
        box = sf.BoundingBox((2, 2, 2), (20, 20, 20), 1)
        matrices = {1: sf.build_similarity_matrix(vols, box,
                                                  image_ids=list(manifest.ids))}
        out = curriculum.pseudo_label_all(manifest, matrices, 3)
        assert out.traces[1].steps == ()
        assert out.binary[1] == {}
        assert out.combined == {}

    def test_duplicate_expert_reaches_unit_dice(self, small_run):
        manifest, _, outcome = small_run
        for sid, trace in outcome.traces.items():
            by_id = {s.selected_id: s for s in trace.steps}
            assert by_id["subj005"].dice >= 0.999

    def test_terminates_in_exactly_unlabeled_steps(self, small_run):
        manifest, _, outcome = small_run
        unlabeled = set(manifest.ids) - set(manifest.expert_ids)
        for trace in outcome.traces.values():
            selected = [s.selected_id for s in trace.steps]
            assert len(selected) == len(unlabeled)
            assert set(selected) == unlabeled

    def test_atlases_drawn_from_live_pool(self, small_run):
        manifest, _, outcome = small_run
        for trace in outcome.traces.values():
            pool = set(manifest.expert_ids)
            for step in trace.steps:
                assert len(step.atlas_ids) == trace.k
                assert set(step.atlas_ids) <= pool
                pool.add(step.selected_id)

    def test_replay_matches_trace(self, small_run):
        manifest, matrices, outcome = small_run
        for sid, trace in outcome.traces.items():
            seq = curriculum.replay_selection(matrices[sid], manifest.expert_ids,
                                              trace.k)
            assert [(s.selected_id, s.atlas_ids) for s in trace.steps] == seq

    def test_deterministic_reruns(self, small_run):
        manifest, matrices, outcome = small_run
        again = curriculum.pseudo_label_all(manifest, matrices, 3, sf.FusionConfig())
        for sid in outcome.traces:
            assert outcome.traces[sid] == again.traces[sid]
            for iid, lab in outcome.binary[sid].items():
                np.testing.assert_array_equal(lab.labels, again.binary[sid][iid].labels)

    def test_random_order_is_seeded_permutation(self, small_run):
        manifest, matrices, _ = small_run
        a = curriculum.pseudo_label_all(manifest, matrices, 3, sf.FusionConfig(),
                                        order="random", order_seed=5)
        b = curriculum.pseudo_label_all(manifest, matrices, 3, sf.FusionConfig(),
                                        order="random", order_seed=5)
        unlabeled = set(manifest.ids) - set(manifest.expert_ids)
        for sid in a.traces:
            sel = [s.selected_id for s in a.traces[sid].steps]
            assert set(sel) == unlabeled
            assert sel == [s.selected_id for s in b.traces[sid].steps]

    def test_combined_maps_cover_pseudo_images(self, small_run):
        manifest, _, outcome = small_run
        unlabeled = set(manifest.ids) - set(manifest.expert_ids)
        assert set(outcome.combined) == unlabeled
        for iid, lab in outcome.combined.items():
            assert set(np.unique(lab.labels)) <= {0, 1, 2, 3}

    def test_requires_enough_experts(self, small_run):
        manifest, matrices, _ = small_run
        with pytest.raises(InsufficientPoolError):
            curriculum.pseudo_label_all(manifest, matrices, k=4)

    def test_trace_jsonl_roundtrip(self, small_run, tmp_path):
        _, _, outcome = small_run
        trace = outcome.traces[1]
        path = tmp_path / "trace.jsonl"
        curriculum.write_trace(trace, path)
        back = curriculum.read_trace(path, 1, trace.k)
        assert back == trace
        first = json.loads(path.read_text().splitlines()[0])
        assert {"step", "structure", "selected", "kth_similarity",
                "atlases", "dice"} <= set(first)
