"""Symmetric generalized CP tensor decomposition.

Fit a Kruskal model whose factor matrices are shared across groups of
permutable modes, under a user-chosen entrywise loss, with exact (L-BFGS-B)
or stochastic (Adam with bad-epoch rollback) optimization.
"""

from .kernels import khatri_rao, mttkrp_dense, mttkrp_sparse, sampled_rows
from .losses import (
    LOSS_NAMES,
    DomainError,
    LossSpec,
    WeightedLoss,
    derivative_tensor,
    get_loss,
    make_loss,
    total_loss,
)
from .objective import (
    Evaluator,
    GradientBundle,
    ObjectiveConfig,
    flatten,
    flatten_gradient,
    gradient,
    gradient_fastpath,
    objective_value,
    unflatten,
)
from .optimize import (
    AdamConfig,
    FitTrace,
    LbfgsbConfig,
    fit_adam,
    fit_lbfgsb,
    initialize_model,
)
from .stochastic import (
    LossEstimator,
    SampledDerivative,
    SamplerConfig,
    sample_stratified,
    sample_uniform,
    stochastic_gradient,
)
from .synth import BinaryGenConfig, GroundTruth, cosine_score, generate_binary, negate_fix
from .tensors import (
    CellDimensionMismatch,
    DenseTensor,
    ModePartition,
    SparseTensor,
    SymKruskal,
    WeightTensor,
    densify,
    is_symmetric,
    matricize,
    model_entry,
    permute_modes,
    reconstruct,
    sparsify,
    vectorize,
)

__version__ = "0.1.0"
