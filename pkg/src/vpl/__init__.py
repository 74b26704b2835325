"""vpl: a desk-scale ViT adaptation lab.

Small dense autodiff core, a configurable Vision Transformer, the full
catalog of head/backbone/prompt-oriented adaptation methods plus gated
mixture-of-experts adapters, synthetic datasets with patient-aware
out-of-distribution splits, and a CLI that ties them into experiment
recipes.
"""

__version__ = "0.1.0"

from ._kernels import available_backends, get_backend, set_backend
from .adaptation import METHODS, AdaptationPlan, build_plan, make_plan, trainable_count
from .backbone import Backbone, BackboneConfig, param_count
from .checkpoint import load_backbone, save_backbone
from .datahub import (
    DatasetManifest,
    SplitSpec,
    SyntheticDomainSpec,
    load_manifest,
    ood_sweep_specs,
    patient_split,
    synth_dataset,
)
from .gmoe import GateVector, gate_summary, gmoe_fuse, moe_fuse
from .gradcheck import grad_check
from .trainlab import (
    EvalResult,
    TrainConfig,
    accuracy,
    auroc,
    evaluate,
    pretrain_expert,
    total_params_multiplier,
    train,
)

__all__ = [
    "__version__",
    "available_backends",
    "get_backend",
    "set_backend",
    "METHODS",
    "AdaptationPlan",
    "build_plan",
    "make_plan",
    "trainable_count",
    "Backbone",
    "BackboneConfig",
    "param_count",
    "load_backbone",
    "save_backbone",
    "DatasetManifest",
    "SplitSpec",
    "SyntheticDomainSpec",
    "load_manifest",
    "ood_sweep_specs",
    "patient_split",
    "synth_dataset",
    "GateVector",
    "gate_summary",
    "gmoe_fuse",
    "moe_fuse",
    "grad_check",
    "EvalResult",
    "TrainConfig",
    "accuracy",
    "auroc",
    "evaluate",
    "pretrain_expert",
    "total_params_multiplier",
    "train",
]
