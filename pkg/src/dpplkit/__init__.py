"""Constrained probabilistic projection toolkit."""

from .constraints import (
    BoxBounds,
    LinearEquality,
    NonlinearEquality,
    TVPenalty,
    conservation_linear,
    conservation_nonlinear_pme,
    hierarchy_constraint,
    load_summation_matrix,
    trapezoid_weights,
    tv_subgradient,
    tv_value,
)
from .dppl import (
    NewtonTrace,
    ProjectionConfig,
    hier_e2e_update,
    jacobian_nonlinear,
    oblique_projector,
    probconserv_update,
    project_box,
    project_linear,
    project_nonlinear,
    project_samples,
    propagate_empirical,
    propagate_linear,
    propagate_nonlinear,
)
from .errors import (
    ConstraintError,
    ConvergenceError,
    DivergenceError,
    DpplError,
    GradientUndefinedError,
    InvalidArgumentError,
    ProjectionFailure,
)
from .metrics import EvalReport, constraint_error, evaluate, mse
from .model import (
    AffineBaseModel,
    Projector,
    TrainConfig,
    TrainReport,
    forward_constrained,
    loss_and_grad,
    predict,
    train,
    train_timing_compare,
)
from .pdegen import (
    PdeDataset,
    StefanAlpha,
    exact_advection,
    exact_heat,
    exact_pme,
    exact_stefan,
    gen_dataset,
    solve_stefan_alpha,
)
from .probdist import (
    PRNG_NAME,
    CrpsGrad,
    GaussianVec,
    crps_gaussian_grad,
    crps_gaussian_scalar,
    crps_gaussian_sum,
    crps_monte_carlo,
    nll_gaussian,
    sample,
)

__version__ = "0.1.0"
