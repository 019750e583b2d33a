"""Radar-camera depth distillation at desk scale.

A small, fully verifiable stack: a float64 reverse-mode autodiff core, FiLM
radar-camera fusion with a point-wise DASPP decoder, saliency-alignment and
depth-distribution distillation losses, synthetic scenes, and a
deterministic training harness.
"""

from .blocks import (
    Conv2dLayer,
    DASPPConfig,
    DASPPStage,
    DecoderStage,
    EncoderStage,
    FiLMParams,
    PointwiseDASPP,
    film_fuse,
    film_modulate,
    make_film,
)
from .depthdist import (
    BinSpec,
    DepthDistribution,
    bin_distribution,
    d2kd_loss,
    default_bins,
    depth_logits,
    make_bins,
)
from .harness import (
    DistillConfig,
    EpochLosses,
    Momentum,
    TrainReport,
    TrainingDiverged,
    ablate_fusion,
    evaluate,
    scene_losses,
    teacher_targets,
    train,
)
from .model import DepthNet, ModelSpec, build_model, micro_spec, student_spec, teacher_spec
from .saliency import (
    DEFAULT_DISTILL_LAYERS,
    SaliencyBundle,
    SaliencyMap,
    gradcam_weights,
    normalize_map,
    saliency_map,
    xkd_loss,
)
from .scenes import (
    Scene,
    SceneParams,
    SupervisionPair,
    benchmark_split,
    dataset,
    generate_scene,
)
from .supervision import (
    LossWeights,
    MetricsReport,
    depth_loss,
    eval_metrics,
    param_count,
    total_loss,
)
from .tensor import (
    AutodiffError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    bilinear_upsample,
    concat,
    conv2d,
    ew_add,
    ew_mul,
    finite_diff_check,
    global_avg_pool,
    new_tape,
    no_grad,
    reduce_mean,
    reduce_sum,
    relu,
    softmax,
)

__version__ = "0.1.0"
