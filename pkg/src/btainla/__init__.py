"""Structured-sparse Bayesian inference for spatial-temporal latent Gaussian models.

Block tridiagonal arrowhead (BTA) factorization, solve, log-determinant
and selected inversion drive an INLA-style pipeline: quasi-Newton mode
search over four hyperparameters, finite-difference Hessian,
hyperparameter marginals, and latent marginals from the selected
inverse.  A synthetic-data generator and a CLI (`btainla`) sit on top.
"""

from .bta import (
    BtaError,
    BtaFactor,
    BtaLayout,
    BtaMatrix,
    DimensionMismatch,
    NotPositiveDefinite,
    SelectedInverse,
    bta_factorize,
    bta_logdet,
    bta_selected_inverse,
    bta_solve,
)
from .inla import (
    FitOptions,
    HyperMarginal,
    InferenceReport,
    PriorConfig,
    eval_objective,
    hyperparam_marginals,
    latent_marginals,
    run_inference,
)
from .model import (
    HYPERPARAMETER_NAMES,
    Dataset,
    HyperParameters,
    ModelSpec,
    assemble_conditional_precision,
    assemble_prior_precision,
    build_lattice_spec,
)
from .parallel import ObjectivePool, TaskPlan
from .simulate import SimConfig, generate_dataset

__all__ = [
    "BtaError",
    "BtaFactor",
    "BtaLayout",
    "BtaMatrix",
    "Dataset",
    "DimensionMismatch",
    "FitOptions",
    "HYPERPARAMETER_NAMES",
    "HyperMarginal",
    "HyperParameters",
    "InferenceReport",
    "ModelSpec",
    "NotPositiveDefinite",
    "ObjectivePool",
    "PriorConfig",
    "SelectedInverse",
    "SimConfig",
    "TaskPlan",
    "assemble_conditional_precision",
    "assemble_prior_precision",
    "bta_factorize",
    "bta_logdet",
    "bta_selected_inverse",
    "bta_solve",
    "build_lattice_spec",
    "eval_objective",
    "generate_dataset",
    "hyperparam_marginals",
    "latent_marginals",
    "run_inference",
]

__version__ = "0.1.0"
