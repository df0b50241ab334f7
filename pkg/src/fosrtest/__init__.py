"""Testing linear shape constraints on coefficient functions in function-on-scalar regression.

The response curves may be fully observed, observed with random missing
intervals, observed discretely with noise, or both.
"""

__version__ = "0.1.0"

from .basis import (
    BasisKind,
    BasisSet,
    constraint_residual,
    custom_basis,
    empty_basis,
    orthonormal_polynomials,
    parse_hypothesis,
    piecewise_linear_basis,
    project,
)
from .core import (
    DesignPair,
    Finding,
    FunctionalDataset,
    Grid,
    RankError,
    Regime,
    SparsityError,
    StatisticKind,
    TestReport,
    validate_dataset,
)
from .inference import (
    NullModel,
    PipelineError,
    TestOptions,
    ThetaSurface,
    design_theta_surface,
    null_model,
    p_value,
    run_test,
    theta_surface,
    tilde_transform,
    tn_statistic,
    tn_statistic_standardized,
)
from .regression import RegressionFit, orthogonalize, pointwise_wls
from .sim import SimulationScenario, generate_dataset, run_experiment, verify_missingness_model
from .smoothing import CovMethod, CovSurface, KernelFamily, KernelSpec, covariance_surface, loocv_bandwidth, nw_smooth, smooth_dataset
