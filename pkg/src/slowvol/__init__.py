"""Portfolio value expansions and strategy comparisons under a slowly varying volatility factor.

Modules
-------
utility      admissible utility classes and their risk-tolerance diagnostics
merton       constant-coefficient Merton problem through the heat representation
expansion    zeroth/first-order value expansion and correction terms
dynamics     market model, strategy families and path simulation
montecarlo   value estimation, convergence studies and optimality comparisons
riccati      exponential-affine moments of the CIR factor (Riccati system)
cli          command-line front end
"""

from .dynamics import (
    CIRParams,
    MarketModel,
    PathConfig,
    SimulationResult,
    StrategyFamily,
    exact_merton_wealth_sample,
    feller_check,
    simulate_paths,
)
from .errors import (
    ConvergenceError,
    DomainError,
    ExplosionError,
    NumericalDifferentiationError,
    OverflowGuardError,
    RangeError,
    SimulationError,
    SlowvolError,
    ValidationError,
)
from .expansion import (
    ApproximationDescriptor,
    Estimate,
    ExpansionResult,
    SlowFactorFrozen,
    ZerothOrder,
    approximation_select,
    expand,
    pi0_eval,
    v0_eval,
    v0_z_eval,
    v1_eval,
    vtilde1_quarter_eval,
    vtilde_2alpha_eval,
)
from .merton import (
    MertonSolution,
    ResidualReport,
    SharpeContext,
    heat_invert,
    heat_solve,
    merton_strategy,
    merton_value,
    operator_residuals,
    risk_tolerance,
)
from .montecarlo import (
    ConvergenceStudy,
    MCEstimate,
    OptimalityReport,
    convergence_study,
    estimate_value,
    optimality_compare,
)
from .riccati import (
    RiccatiSolution,
    RiccatiSpec,
    a_closed_form,
    b_closed_form,
    closed_form_solution,
    moment_function,
    riccati_integrate,
    tau_star,
)
from .utility import (
    Assumption1Report,
    InverseMarginalMeasure,
    MixturePowers,
    Power,
    PowerMeasure,
    RiskProfile,
    UtilitySpec,
    assumption1_check,
    inverse_marginal,
    risk_tolerance_terminal,
    u_eval,
    utility_from_params,
)

__version__ = "0.1.0"
