"""Masked-reconstruction anomaly detection for multivariate time series."""

__version__ = "0.1.0"

from .autodiff import (  # noqa: F401
    DiffGraph,
    Tensor,
    grad_check,
    log_cosh_loss,
    scaled_dot_attention,
    softmax_rows,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint  # noqa: F401
from .data import (  # noqa: F401
    NormalizationStats,
    SeriesFrame,
    WindowSample,
    fit_normalize,
    load_csv,
    make_windows,
    save_csv,
)
from .detection import (  # noqa: F401
    ErrorSeries,
    EvalReport,
    ThresholdModel,
    calibrate,
    detect_two_level,
    estimate_gate,
    point_adjust,
    prf1,
    score,
)
from .model import (  # noqa: F401
    MaskPlan,
    ModelConfig,
    ReconstructionModel,
    build_mask_plan,
    forward,
    masked_loss,
    reconstruct_all,
    tokenize,
)
from .optim import AdamState, adam_init, adam_step  # noqa: F401
from .synthetic import (  # noqa: F401
    AnomalyGroup,
    AnomalyPlan,
    SyntheticSpec,
    default_spec,
    gen_recipe_synthetic,
    gen_sincos_synthetic,
    generate_entity,
    generate_fleet,
    inject_anomalies,
    load_spec,
)
from .training import TrainConfig, TrainResult, finetune, pretrain  # noqa: F401
