"""From-scratch neural network core: specs, parameters, passes, grad check."""

from .gradcheck import GradCheckReport, finite_difference_check
from .ops import (
    ForwardTrace,
    backward,
    bn_update_running,
    forward,
    update_running_stats,
)
from .params import (
    ParamStore,
    glorot_uniform,
    infer_probe_split,
    init_params,
    is_trainable,
    load_checkpoint,
    save_checkpoint,
    trainable_names,
)
from .spec import (
    AvgPool,
    BatchNorm,
    Conv,
    Dense,
    Flatten,
    NetworkSpec,
    Relu,
    Residual,
    bn_momenta,
    infer_shapes,
    mini_resnet,
    set_bn_momentum,
)

__all__ = [
    "AvgPool",
    "BatchNorm",
    "Conv",
    "Dense",
    "Flatten",
    "ForwardTrace",
    "GradCheckReport",
    "NetworkSpec",
    "ParamStore",
    "Relu",
    "Residual",
    "backward",
    "bn_momenta",
    "bn_update_running",
    "finite_difference_check",
    "forward",
    "glorot_uniform",
    "infer_probe_split",
    "infer_shapes",
    "init_params",
    "is_trainable",
    "load_checkpoint",
    "mini_resnet",
    "save_checkpoint",
    "set_bn_momentum",
    "trainable_names",
    "update_running_stats",
]
