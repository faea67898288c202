"""pinlab: a numerical laboratory for the pinned polymer at its critical coupling.

The package computes, at desk scale, the spectral and path-level behavior
of the continuous-time nearest-neighbor walk on Z^d rewarded for time
spent at the origin: lattice Green functions and the critical coupling
beta_d = 2d e_d, renewal solves and contour inversions of the pinned heat
kernel and partition function, eigenfunctions and the stationary law of
the conditioned chain, and Monte Carlo reproduction of the
dimension-dependent limit laws (last-visit time, Gaussian-mixture
endpoint, globular occupation).
"""

from .lattice import (
    CoarseGridError,
    FirstPassageDensity,
    TimeGrid,
    first_passage_density,
    free_kernel,
    free_kernel_diag,
    free_resolvent,
    free_resolvent_torus,
    scaled_bessel_i,
    symbol,
)
from .spectral import (
    EigenPair,
    ExpansionCheck,
    I_diff,
    I_lambda,
    I_lambda_prime,
    LatticeField,
    MomentScan,
    NoEigenvalueError,
    NonNormalizableError,
    SpectralTable,
    StationaryMeasure,
    asymptotic_expansion_check,
    critical_beta,
    eigenfunction,
    lambda0,
    moment_scan,
    stationary_measure,
)
from .kernels import (
    ConvergenceError,
    KernelGrid,
    PartitionCurve,
    eigenvalue_residue,
    h_transition_density,
    h_transition_row,
    inverse_laplace_diag,
    partition_at,
    partition_curve,
    partition_large_t,
    pinned_kernel_offdiag,
    solve_pinned_diag,
)
from .montecarlo import (
    EndpointReport,
    EscapeEstimate,
    HChainRun,
    LowESSError,
    PathSample,
    RadiusCapError,
    SigmaReport,
    WeightedEnsemble,
    endpoint_statistics,
    estimate_escape_probability,
    limit_endpoint_cf,
    limit_sigma_cdf,
    limit_sigma_density,
    sample_free_paths,
    sample_pinned_paths,
    sigma_distribution,
    simulate_h_chain,
)

__version__ = "0.1.0"
