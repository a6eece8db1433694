"""Virtual-cohort synthesis and lattice-of-experts cardiac segmentation."""

from .activation import ActivationResult, fuse, proxy_score, run_activation, select_experts
from .anchors import Anchor, AnchorSet, anchor_gamma_targets, select_anchors
from .config import PipelineConfig, load_config
from .lattice import (
    Expert,
    ExpertSpec,
    Lattice,
    SampleStore,
    build_lattice_specs,
    build_sample_store,
    fan_out,
    load_lattice,
    predict,
    save_lattice,
    train_expert,
    train_lattice,
)
from .metrics import (
    CompositeLosses,
    DeformationField,
    LossWeights,
    MetricReport,
    composite_losses,
    correction_loss,
    dice3d,
    evaluate_masks,
    generalized_dice,
    hd95,
    ncc,
    smoothness,
    ssim,
)
from .phantom import GridSpec, LatentVector, decode, encode, make_phantom_cohort
from .pipeline import Pipeline, run_pipeline
from .severity import (
    NormalizationStats,
    SeverityScore,
    f_arv,
    f_dcm,
    f_hcm,
    f_minf,
    fit_normalization,
    normalize_to_gamma,
)
from .siv import SIVPlan, merge_plans, partition, verify_plan
from .trajectory import (
    SeverityMapping,
    TrajectorySegment,
    VirtualCohort,
    VirtualPatient,
    build_severity_mapping,
    resample_weights,
    slerp,
    synthesize_cohort,
)
from .volume import (
    LabelMask,
    Pathology,
    PreprocessSpec,
    ProbabilityMap,
    Subject,
    VoxelGrid,
    argmax_labels,
    load_volume,
    preprocess,
    principal_axis_lengths,
    store_volume,
    volume_of,
)

__version__ = "0.1.0"
