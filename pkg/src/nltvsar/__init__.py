"""Despeckling spotlight SAR imaging with NLTV + GMC regularised ADMM."""

__version__ = "0.1.0"

from .core import (
    ComplexImage,
    ConfigurationError,
    DataError,
    DimensionError,
    DivergenceError,
    FormatError,
    LayerParams,
    NltvSarError,
    ParameterError,
    RadarParams,
    SamplingMask,
    TruncationError,
    magnitude,
    read_image,
    write_image,
)
from .operators import (
    DenseObservation,
    OperatorPlan,
    apply_mask,
    build_dense_observation,
    build_plan,
    image,
    inverse_image,
)
from .regularization import (
    DualField,
    NLTVConfig,
    NLWeights,
    compute_weights,
    gmc_penalty,
    gmc_threshold,
    nl_divergence,
    nl_gradient,
    nltv_prox,
)
from .solver import Mode, SolverConfig, SolverState, admm_solve, residuals, x_update
from .unrolled import (
    NetworkParams,
    TrainConfig,
    forward,
    load_checkpoint,
    loss,
    save_checkpoint,
    train,
)
