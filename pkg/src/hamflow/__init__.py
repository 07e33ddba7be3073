"""Hamiltonian normalizing flows with Lie-algebra symmetry constraints."""

__version__ = "0.1.0"

from .autodiff import (
    ConfigError,
    ContractError,
    Expr,
    NumericError,
    ParamStore,
    Program,
    evaluate,
    grad_inputs,
    grad_params,
)
from .densities import (
    BaseDensity,
    GridData,
    ModelDensity,
    kde_grid,
    model_joint_log_prob,
    model_sample,
    soft_uniform,
    spherical_normal,
)
from .dynamics import (
    FlowSpec,
    ScalarField,
    StateVector,
    flow_forward,
    flow_inverse,
    infinitesimal_transform,
    jacobian_determinant_check,
    leapfrog_step,
    poisson_bracket,
)
from .networks import GaussianEncoder, MlpSpec, encoder_sample, mlp_apply
from .symmetry import (
    Generator,
    GeneratorSet,
    base_invariance_check,
    commutator_penalty,
    density_invariance_probe,
    noether_drift,
    so2_generator,
)
from .training import (
    Adam,
    Dataset,
    ExperimentConfig,
    TrainingAbort,
    adam_step,
    build_model,
    elbo,
    lagrangian,
    lambda_ascent,
    make_dataset,
    train,
)
