"""Gradient-isolated local learning with momentum-coupled auxiliary adapters."""

__version__ = "0.1.0"

from .autodiff import (  # noqa: F401
    GradCheckReport,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    backward,
    forward_primitive,
    grad_check,
    softmax_cross_entropy,
    stop_gradient,
)
from .network import (  # noqa: F401
    AblationFlags,
    BudgetError,
    LayerSpec,
    MomentumAdapter,
    PartitionedNetwork,
    adapter_forward,
    build_partitioned,
    ema_update,
    forward_inference,
    forward_train_block,
    strip_adapters,
)
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401
from .memory import MemoryReport, measure_peak_memory  # noqa: F401
from .training import (  # noqa: F401
    NumericalError,
    SgdConfig,
    TrainState,
    e2e_train_step,
    evaluate,
    fit,
    local_train_step,
    lr_at,
    sgd_step,
    total_objective,
)
from .analysis import (  # noqa: F401
    CkaMatrix,
    ProbeConfig,
    ProbeReport,
    ZeroVarianceError,
    cka_report,
    collect_activations,
    linear_cka,
    linear_probe,
    probe_blocks,
)
from .data import (  # noqa: F401
    DataError,
    Dataset,
    gen_blobs,
    gen_spirals,
    load_csv,
    load_idx,
    save_csv,
    standardize,
)
