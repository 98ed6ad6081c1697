"""Graph coarsening with restricted spectral approximation and oriented coarse message passing."""

from .coarsening import (
    Coarsening,
    LoukasConfig,
    LoukasResult,
    RsaReport,
    coarse_laplacian_check,
    coarsen_adjacency,
    coarsen_signal,
    from_partition,
    identity_coarsening,
    lift_signal,
    loukas_coarsen,
    rsa_constant,
)
from .graph import (
    Graph,
    SemiNormContext,
    SpectralBasis,
    build_laplacian,
    build_propagation,
    check_preserving,
    columns_seminorm,
    make_context,
    operator_seminorm,
    seminorm,
    spectral_subspace,
)
from .operators import (
    BoundCertificate,
    BoundConstants,
    bound_constants,
    certify,
    coarse_operator,
    k_step_bound,
    layerwise_error_certificate,
    mp_error,
    single_step_bound,
    theta_constants,
    training_bound,
)

__version__ = "0.1.0"
