"""Monte Carlo engine for semi-classical Brownian bridges on manifolds with a pole."""

from .geometry import (
    GeometryModel,
    GeometryError,
    DegeneratePointError,
    euclidean,
    hyperbolic,
    warped,
    metric_at,
    metric_inverse_at,
    christoffel_at,
    ricci_sharp_at,
    radial_data,
    jacobian_data,
    phi_data,
    log_k_data,
    laplacian_log_k,
    hyperbolic_phi_closed_form,
    condition_audit,
)
from .bridge import (
    TimeGrid,
    FrameState,
    FramePathSample,
    SimulationError,
    make_time_grid,
    path_stream,
    horizontal_heun_step,
    reorthonormalize,
    orthonormality_defect,
    simulate_bridge,
    simulate_bm,
    simulate_bessel_bridge,
)
from .pathspace import (
    CMDirection,
    CylinderFunctional,
    DivergenceBreakdown,
    RegistryError,
    cm_basis,
    cm_linear,
    direction_from_key,
    functional_from_key,
    differential_along,
    divergence_direct,
    divergence_lemma1,
    green_gradient_norm,
    green_based,
    green_pinned,
)
from .verify import (
    McReport,
    ibp_check,
    girsanov_check,
    radial_law_check,
    endpoint_decay_check,
    identity_suite,
    representation_equiv_check,
)
from .config import RunConfig, ConfigError, parse_config
from .cli import run_experiment, main

__version__ = "0.1.0"
