"""mwdml: estimation and diagnostics for multiway-clustered (separately
exchangeable) data arrays.

Layers, bottom up:

* ``arrays``       latent-factor data generation on K-way index lattices
* ``partition``    transversal partitions of masked sub-lattices
* ``projections``  conditional means, orthogonal projections, decompositions
* ``entropy``      covering-number thresholds and entropy integrals
* ``bounds``       simulated sup-process vs. maximal-inequality bounds
* ``models``       moment models, nuisances, orthogonality, oracle variance
* ``learners``     lasso / regression tree + complexity-rate calculators
* ``gmm``          full-sample debiased GMM (two-step cluster-robust weighting)
* ``variance``     multiway cluster-robust sandwich and intervals
* ``harness``      Monte Carlo driver and reports (CLI in ``mwdml.cli``)

Numeric kernels run on a compiled extension when available, with a pure
NumPy fallback producing identical streams; see ``mwdml.backend_name()``.
"""

from mwdml._backend import backend_name
from mwdml.arrays import (
    ArrayError,
    ClusteredSample,
    DgpSpec,
    LatentTable,
    Shape,
    additive_spec,
    generate_latent,
    iv_spec,
    materialize,
    multiplicative_spec,
    permute,
    plr_spec,
)
from mwdml.gmm import GmmFit, GmmSettings, WeightingSpec, empirical_moment, solve_gmm
from mwdml.harness import McConfig, emit_reports, run_monte_carlo, run_replication
from mwdml.learners import (
    LassoSpec,
    RateInputs,
    TreeSpec,
    default_penalty,
    fit_lasso,
    fit_tree,
    rho_rate,
    vc_characteristics,
)
from mwdml.models import (
    MomentModel,
    Nuisance,
    linear_iv_model,
    location_model,
    oracle_psi0,
    oracle_V,
    orthogonality_check,
    plr_model,
    plr_nonorth_model,
)
from mwdml.partition import build_transversal_partition, verify_partition
from mwdml.projections import (
    hajek_projection,
    hoeffding_decompose,
    pi_projection,
    population_mean,
)
from mwdml.variance import cgm_psi, confidence_interval, psi_hat, psi_hat_k, variance_report

__version__ = "0.1.0"

__all__ = [
    "ArrayError",
    "ClusteredSample",
    "DgpSpec",
    "GmmFit",
    "GmmSettings",
    "LassoSpec",
    "LatentTable",
    "McConfig",
    "MomentModel",
    "Nuisance",
    "RateInputs",
    "Shape",
    "TreeSpec",
    "WeightingSpec",
    "additive_spec",
    "backend_name",
    "build_transversal_partition",
    "cgm_psi",
    "confidence_interval",
    "default_penalty",
    "emit_reports",
    "empirical_moment",
    "fit_lasso",
    "fit_tree",
    "generate_latent",
    "hajek_projection",
    "hoeffding_decompose",
    "iv_spec",
    "linear_iv_model",
    "location_model",
    "materialize",
    "multiplicative_spec",
    "oracle_V",
    "oracle_psi0",
    "orthogonality_check",
    "permute",
    "pi_projection",
    "plr_model",
    "plr_nonorth_model",
    "plr_spec",
    "population_mean",
    "psi_hat",
    "psi_hat_k",
    "rho_rate",
    "run_monte_carlo",
    "run_replication",
    "solve_gmm",
    "variance_report",
    "vc_characteristics",
    "verify_partition",
]
