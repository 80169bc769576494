"""Similarity-ranked curriculum pseudo-labeling for 3D volumes.

A labeled pool of volumes is grown by repeatedly picking the unlabeled
image most similar to the pool (joint-histogram mutual information
inside per-structure bounding boxes), fusing its most similar atlases
with locally weighted STAPLE-style EM, and promoting the fused map into
the pool. Per-structure binary posteriors combine into multi-class
segmentations, and everything is verifiable end to end on deterministic
synthetic phantoms.
"""
from .combine import PosteriorStack, combine, evaluate
from .curriculum import (
    CurriculumStep,
    CurriculumTrace,
    DatasetManifest,
    ImageRecord,
    PseudoLabelOutcome,
    kth_similarity,
    load_manifest,
    pseudo_label_all,
    replay_selection,
    save_manifest,
    select_atlases,
    select_next,
)
from .errors import (
    BoundsError,
    DegenerateInputError,
    EmptyStructureError,
    FormatError,
    InsufficientPoolError,
    ShapeError,
    UnsupportedShapeError,
)
from .fusion import (
    FusionConfig,
    FusionResult,
    RaterPerformance,
    WeightField,
    local_weights,
    lop_fuse,
    majority_vote,
    staple_em,
)
from .grid import BoundingBox, LabelMap, Volume, crop, dice, structure_bbox
from .nifti import load_labels, load_volume, save_volume
from .phantom import Ellipsoid, PhantomSpec, RaterSpec, generate, simulate_raters
from .report import EvaluationReport, report, save_report_figure, save_report_json, save_report_tsv
from .similarity import (
    JointHistogram,
    SimilarityMatrix,
    build_similarity_matrix,
    joint_histogram,
    mutual_information,
    structure_similarity,
)

__version__ = "0.1.0"
