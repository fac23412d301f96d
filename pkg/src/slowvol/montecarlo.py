"""Monte Carlo value estimation, convergence studies and optimality comparisons.

Variance reduction
------------------
Every estimator optionally subtracts the martingale control
``int phi_x pi sigma dW + phi_z sqrt(delta) g dW^Z`` built from the gradient of
the zeroth-order value (see :class:`slowvol.expansion.ZerothOrder`). The
control has zero mean for any strategy, so it never biases an estimate.

For expansion-error studies the estimate at ``delta`` is additionally paired
with a frozen-factor run (``delta = 0``) driven by the same random numbers:
``V = v0 + mean(Y_delta - Y_0)``. The frozen run has known mean ``v0``, so
this is again unbiased (up to time discretization, which largely cancels in
the difference) and isolates the small ``delta``-dependent part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import MarketModel, PathConfig, StrategyFamily, simulate_paths
from .errors import ValidationError
from .expansion import SlowFactorFrozen, ZerothOrder, v0_eval, v1_eval
from .utility import UtilitySpec

__all__ = [
    "MCEstimate",
    "ConvergenceStudy",
    "OptimalityReport",
    "estimate_value",
    "convergence_study",
    "optimality_compare",
    "loglog_fit",
    "linear_fit",
    "ell_richardson",
]


@dataclass(frozen=True)
class MCEstimate:
    """Sample mean of ``U(X_T)`` (optionally control-variate adjusted)."""

    mean: float
    stderr: float
    n_paths: int
    absorbed_fraction: float
    stderr_cap_exceeded: bool = False
    method: str = "plain"

    def __post_init__(self):
        if not (np.isfinite(self.mean) and np.isfinite(self.stderr)):
            raise ValidationError("Monte Carlo estimate is not finite", "mc")


def _stderr(sample: np.ndarray) -> float:
    n = sample.size
    if n < 2:
        return math.nan
    if np.all(sample == sample[0]):
        return 0.0  # avoid rounding residue of the two-pass variance
    return float(np.std(sample, ddof=1) / math.sqrt(n))


def _terminal_utility(utility, x):
    """``U(X_T)`` with absorbed paths (``X_T = 0``) valued at ``U(0+) = 0``."""
    x = np.asarray(x, float)
    pos = x > 0
    if pos.all():
        return np.asarray(utility.u(x), float)
    out = np.zeros_like(x)
    out[pos] = utility.u(x[pos])
    return out


def _samples(model, utility, strategy, start, T, cfg, grad):
    res = simulate_paths(model, strategy, start, T, cfg, value_gradient=grad)
    y = _terminal_utility(utility, res.terminal_wealth)
    if res.control is not None:
        y = y - res.control
    return y, res.diagnostics["absorbed_count"] / y.size


def estimate_value(
    model: MarketModel,
    strategy: Callable,
    start: tuple[float, float, float],
    cfg: PathConfig,
    utility: UtilitySpec,
    T: float = 1.0,
    *,
    value_gradient: Optional[Callable] = None,
    stderr_cap: Optional[float] = None,
) -> MCEstimate:
    """Estimate ``E[U(X_T)]`` for the given strategy.

    ``value_gradient`` enables the martingale control variate. A standard
    error above ``stderr_cap`` is flagged, not fatal.
    """
    y, absorbed = _samples(model, utility, strategy, start, T, cfg, value_gradient)
    se = _stderr(y)
    return MCEstimate(
        mean=float(np.mean(y)),
        stderr=se,
        n_paths=int(y.size),
        absorbed_fraction=float(absorbed),
        stderr_cap_exceeded=bool(stderr_cap is not None and se > stderr_cap),
        method="control_variate" if value_gradient is not None else "plain",
    )


# ---------------------------------------------------------------------------
# fitting helpers
# ---------------------------------------------------------------------------


def loglog_fit(deltas, values, stderrs):
    """Weighted least squares of ``log|value|`` on ``log delta``.

    Weights are the inverse delta-method variances ``(value/stderr)**2``.
    Returns ``(slope, intercept, slope_stderr)``; the slope standard error
    is taken from the known-variance covariance and, when there are enough
    points, inflated by the reduced chi-square if that exceeds one.
    """
    d = np.asarray(deltas, float)
    v = np.abs(np.asarray(values, float))
    s = np.asarray(stderrs, float)
    if d.size < 2 or np.any(v <= 0):
        return math.nan, math.nan, math.nan
    y = np.log(v)
    X = np.column_stack([np.ones_like(d), np.log(d)])
    with np.errstate(divide="ignore"):
        w = np.where(s > 0, (v / s) ** 2, 1e30)
    w = np.minimum(w, 1e30)
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    beta = cov @ (XtW @ y)
    if d.size > 2:
        chi2 = float(np.sum(w * (y - X @ beta) ** 2) / (d.size - 2))
        cov = cov * max(1.0, chi2)
    return float(beta[1]), float(beta[0]), float(math.sqrt(cov[1, 1]))


def linear_fit(deltas, values, stderrs):
    """Weighted least squares ``value ~ a + b delta`` with weights ``1/stderr**2``.

    Returns ``((a, b), zscores)`` where ``zscores = (value - fit)/stderr``;
    ``nan`` when a standard error vanishes.
    """
    d = np.asarray(deltas, float)
    v = np.asarray(values, float)
    s = np.asarray(stderrs, float)
    if d.size < 2 or np.any(~(s > 0)):
        return (math.nan, math.nan), np.full(d.shape, math.nan)
    X = np.column_stack([np.ones_like(d), d])
    w = 1.0 / s**2
    XtW = X.T * w
    coef = np.linalg.solve(XtW @ X, XtW @ v)
    return (float(coef[0]), float(coef[1])), (v - X @ coef) / s


def ell_richardson(d_big, l_big, d_small, l_small, order: float = 0.5) -> float:
    """Two-point Richardson extrapolation of ``L(delta) = ell + c delta**order``."""
    r = (d_big / d_small) ** order
    return float((r * l_small - l_big) / (r - 1.0))


# ---------------------------------------------------------------------------
# convergence study
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceStudy:
    """Errors of the expansion against Monte Carlo across ``delta``."""

    deltas: np.ndarray
    estimates: np.ndarray
    stderrs: np.ndarray
    comparators: np.ndarray
    errors: np.ndarray
    fitted_rate: float
    rate_ci: tuple[float, float]
    rate_stderr: float
    intercept: float
    band_ok: bool
    band_zscores: np.ndarray
    inconclusive: bool
    degraded_at: Optional[float]
    absorbed_fraction: np.ndarray
    comparator_name: str
    budget_warning: bool = False
    notes: list = field(default_factory=list)
    linear_fit: tuple[float, float] = (math.nan, math.nan)
    linear_band_zscores: np.ndarray = field(default_factory=lambda: np.array([]))
    linear_band_ok: bool = False

    def passes(self, lo: float = 0.7, hi: float = 1.3) -> bool:
        """Rate inside ``[lo, hi]`` and every error inside its 3-stderr band of both fits."""
        return (not self.inconclusive) and lo <= self.fitted_rate <= hi and self.band_ok and self.linear_band_ok

    def rows(self):
        for i, d in enumerate(self.deltas):
            yield {
                "delta": d,
                "estimate": self.estimates[i],
                "stderr": self.stderrs[i],
                "comparator": self.comparators[i],
                "error": self.errors[i],
                "scaled_difference": (self.estimates[i] - self.comparators[i]) / math.sqrt(d),
            }

    def summary(self) -> dict:
        return {
            "comparator": self.comparator_name,
            "fitted_rate": self.fitted_rate,
            "rate_ci": list(self.rate_ci),
            "rate_stderr": self.rate_stderr,
            "band_ok": self.band_ok,
            "max_band_zscore": float(np.max(np.abs(self.band_zscores))) if self.band_zscores.size else math.nan,
            "linear_fit": list(self.linear_fit),
            "linear_band_ok": self.linear_band_ok,
            "max_linear_band_zscore": float(np.max(np.abs(self.linear_band_zscores))) if self.linear_band_zscores.size else math.nan,
            "inconclusive": self.inconclusive,
            "degraded_at": self.degraded_at,
            "budget_warning": self.budget_warning,
            "max_absorbed_fraction": float(np.max(self.absorbed_fraction)),
            "notes": list(self.notes),
        }


def _validate_deltas(deltas, min_count=4, min_span=8.0):
    d = np.asarray(deltas, float)
    if d.ndim != 1 or d.size < min_count:
        raise ValidationError(f"at least {min_count} delta values are required", "study.deltas")
    if np.any(d <= 0) or np.any(d > 1):
        raise ValidationError("deltas must lie in (0, 1]", "study.deltas")
    if np.any(np.diff(d) >= 0):
        raise ValidationError("deltas must be strictly decreasing", "study.deltas")
    if d[0] / d[-1] < min_span * (1 - 1e-12):
        raise ValidationError(f"deltas must span a factor of at least {min_span:g}", "study.deltas")
    return d


def convergence_study(
    model: MarketModel,
    utility: UtilitySpec,
    start: tuple[float, float, float],
    deltas: Sequence[float],
    cfg: PathConfig,
    T: float = 1.0,
    *,
    comparator: str | Callable = "v0+sqrt(delta)*v1",
    strategy: Optional[Callable] = None,
    control_variate: bool = True,
    pair_frozen: bool = True,
    z_sigma: float = 2.0,
) -> ConvergenceStudy:
    """Error of ``v0 + sqrt(delta) v1`` (or ``v0`` alone) against Monte Carlo.

    Every ``delta`` uses the same seed (common random numbers across the
    study). ``comparator`` is ``"v0+sqrt(delta)*v1"``, ``"v0"`` or a callable
    ``delta -> float``; ``strategy`` defaults to the zeroth-order strategy.

    The rate is the weighted log-log slope of the error against ``delta``.
    The study is inconclusive when some error is not resolved above
    ``z_sigma`` standard errors; ``degraded_at`` is the largest such ``delta``.
    """
    d = _validate_deltas(deltas)
    t, x, z = (float(v) for v in start)
    zo = ZerothOrder(model, utility, T)
    frozen = SlowFactorFrozen.from_model(model, z, T)
    strat = zo.pi0 if strategy is None else strategy
    grad = zo.gradient if control_variate else None

    v0 = float(v0_eval(frozen, utility, t, x))
    if callable(comparator):
        comp_fn, name = comparator, getattr(comparator, "__name__", "custom")
    elif comparator == "v0+sqrt(delta)*v1":
        v1 = float(v1_eval(frozen, utility, t, x))
        comp_fn, name = (lambda dl: v0 + math.sqrt(dl) * v1), comparator
    elif comparator == "v0":
        comp_fn, name = (lambda dl: v0), comparator
    else:
        raise ValidationError(f"unknown comparator {comparator!r}", "study.comparator")

    pairing = pair_frozen and strategy is None
    y0 = None
    if pairing:
        y0, _ = _samples(model.with_delta(0.0), utility, strat, start, T, cfg, grad)

    est, se, absorbed, comps = [], [], [], []
    for dl in d:
        y, ab = _samples(model.with_delta(dl), utility, strat, start, T, cfg, grad)
        if pairing:
            diff = y - y0
            est.append(v0 + float(np.mean(diff)))
            se.append(_stderr(diff))
        else:
            est.append(float(np.mean(y)))
            se.append(_stderr(y))
        absorbed.append(ab)
        comps.append(float(comp_fn(dl)))
    est, se, comps = np.array(est), np.array(se), np.array(comps)
    err = np.abs(est - comps)

    resolved = err > z_sigma * se
    notes = []
    inconclusive = not bool(np.all(resolved))
    degraded = float(d[~resolved][0]) if inconclusive else None
    if inconclusive:
        notes.append(f"Monte Carlo noise dominates the error from delta = {degraded:g}; increase n_paths")
    slope, icpt, slope_se = loglog_fit(d, err, se) if np.all(err > 0) else (math.nan, math.nan, math.nan)
    if np.isfinite(slope):
        fit = np.exp(icpt) * d**slope
        zsc = (err - fit) / np.where(se > 0, se, np.inf)
        band_ok = bool(np.all(np.abs(zsc) <= 3.0))
        ci = (slope - 1.96 * slope_se, slope + 1.96 * slope_se)
    else:
        zsc = np.full(d.size, math.nan)
        band_ok = False
        ci = (math.nan, math.nan)
    lin, lin_z = linear_fit(d, err, se)
    lin_ok = bool(np.all(np.abs(lin_z) <= 3.0))
    return ConvergenceStudy(
        deltas=d,
        estimates=est,
        stderrs=se,
        comparators=comps,
        errors=err,
        fitted_rate=slope,
        rate_ci=ci,
        rate_stderr=slope_se,
        intercept=icpt,
        band_ok=band_ok,
        band_zscores=zsc,
        inconclusive=inconclusive,
        degraded_at=degraded,
        absorbed_fraction=np.array(absorbed),
        comparator_name=name,
        budget_warning=inconclusive,
        notes=notes,
        linear_fit=lin,
        linear_band_zscores=lin_z,
        linear_band_ok=lin_ok,
    )


# ---------------------------------------------------------------------------
# optimality comparison
# ---------------------------------------------------------------------------

CASE_ZERO = "i"
CASE_FINITE = "ii"
CASE_DIVERGENT = "iii"
CASE_LEADING_GAP = "iv"
CASE_INDETERMINATE = "indeterminate"


@dataclass
class OptimalityReport:
    """Paired comparison of a strategy family against the zeroth-order strategy.

    ``per_delta_table`` rows are ``(delta, scaled, scaled_stderr, diff,
    diff_stderr)`` with ``diff = mean(U(X_family) - U(X_pi0))`` and
    ``scaled = diff / sqrt(delta)``.
    """

    deltas: np.ndarray
    per_delta_table: np.ndarray
    ell_hat: float
    ell_stderr: float
    ell_richardson: float
    case_tag: str
    expected_tag: str
    tag_consistent: bool
    exponent: float
    exponent_ci: tuple[float, float]
    pathwise_zero: bool
    never_significantly_positive: bool
    gap0: Optional[float] = None
    gap0_stderr: Optional[float] = None
    notes: list = field(default_factory=list)
    baseline: dict = field(default_factory=dict, repr=False)

    @property
    def scaled(self) -> np.ndarray:
        return self.per_delta_table[:, 1]

    @property
    def scaled_stderr(self) -> np.ndarray:
        return self.per_delta_table[:, 2]

    def rows(self):
        for r in self.per_delta_table:
            yield {"delta": r[0], "scaled_difference": r[1], "stderr": r[2], "difference": r[3], "difference_stderr": r[4]}

    def summary(self) -> dict:
        out = {
            "case_tag": self.case_tag,
            "expected_tag": self.expected_tag,
            "tag_consistent": self.tag_consistent,
            "ell_hat": self.ell_hat,
            "ell_stderr": self.ell_stderr,
            "ell_richardson": self.ell_richardson,
            "exponent": self.exponent,
            "exponent_ci": list(self.exponent_ci),
            "pathwise_zero": self.pathwise_zero,
            "never_significantly_positive": self.never_significantly_positive,
            "gap0": self.gap0,
            "gap0_stderr": self.gap0_stderr,
            "notes": list(self.notes),
        }
        if self.case_tag == CASE_DIVERGENT:
            out["caveat"] = "the limit is reported as a divergence trend (exponent fit), not a value"
        return out


def _expected_tag(family: StrategyFamily) -> str:
    if not family.identical_to_pi0:
        return CASE_LEADING_GAP
    if family.pi1_scale == 0.0:
        return CASE_ZERO
    a = family.alpha
    if a > 0.25 + 1e-12:
        return CASE_ZERO
    if abs(a - 0.25) <= 1e-12:
        return CASE_FINITE
    return CASE_DIVERGENT


def optimality_compare(
    model: MarketModel,
    utility: UtilitySpec,
    family: StrategyFamily,
    start: tuple[float, float, float],
    deltas: Sequence[float],
    cfg: PathConfig,
    T: float = 1.0,
    *,
    control_variate: bool = True,
    richardson_order: float = 0.5,
    divergence_threshold: float = -0.05,
    zero_threshold: float = 0.25,
    baseline: Optional[dict] = None,
    compute_gap0: bool = True,
) -> OptimalityReport:
    """Estimate ``(V_family - V_pi0) / sqrt(delta)`` with paired paths.

    Common random numbers are mandatory: both strategies at each ``delta``
    share the seed, hence every Brownian increment. Tags follow the observed
    scaling of the paired difference:

    * (i): the scaled difference vanishes (pathwise zero, or a fitted
      exponent above ``zero_threshold``, i.e. ``o(sqrt(delta))``);
    * (iii): exponent below ``divergence_threshold`` with its 95% interval
      excluding 0;
    * (ii): otherwise, a significantly negative plateau;
    * (iv): family with a different leading strategy whose unscaled
      difference stays significantly negative;
    * ``indeterminate``: no scaled value is resolved above 2 standard errors.

    ``baseline`` (``delta -> samples``) caches the zeroth-order runs so
    several families can share them; it is filled in and returned on the
    report.
    """
    if not cfg.common_random_numbers:
        raise ValidationError("optimality comparisons require common random numbers", "mc.common_random_numbers")
    d = _validate_deltas(deltas, min_count=2, min_span=1.0)
    zo = ZerothOrder(model, utility, T)
    grad = zo.gradient if control_variate else None
    cache = {} if baseline is None else baseline
    rows = []
    all_zero = True
    for dl in d:
        m = model.with_delta(dl)
        key = ("pi0", float(dl), int(cfg.seed), int(cfg.n_paths))
        if key not in cache:
            cache[key], _ = _samples(m, utility, zo.pi0, start, T, cfg, grad)
        y_ref = cache[key]
        y_fam, _ = _samples(m, utility, family.at(dl), start, T, cfg, grad)
        diff = y_fam - y_ref
        all_zero &= bool(np.all(diff == 0.0))
        mean = float(np.mean(diff))
        se = _stderr(diff)
        sq = math.sqrt(dl)
        rows.append((dl, mean / sq, se / sq, mean, se))
    table = np.array(rows)
    scaled, sse = table[:, 1], table[:, 2]
    notes = []

    never_pos = bool(np.all(scaled <= 2.0 * sse))
    ell = float(scaled[-1])
    ell_se = float(sse[-1])
    ell_r = ell_richardson(d[-2], scaled[-2], d[-1], scaled[-1], richardson_order) if d.size >= 2 else math.nan

    significant = np.abs(scaled) > 2.0 * sse
    expo, expo_se = math.nan, math.nan
    if not all_zero and np.all(significant) and np.all(np.sign(scaled) == np.sign(scaled[0])):
        expo, _, expo_se = loglog_fit(d, scaled, sse)
    ci = (expo - 1.96 * expo_se, expo + 1.96 * expo_se) if np.isfinite(expo) else (math.nan, math.nan)

    gap0 = gap0_se = None
    if all_zero:
        tag = CASE_ZERO
        ell = ell_r = 0.0
        notes.append("paired differences are identically zero on every path")
    elif not np.any(significant):
        tag = CASE_INDETERMINATE
        notes.append("no scaled difference is resolved above 2 standard errors")
    elif not family.identical_to_pi0:
        # leading strategies differ: O(1) gap, compare with the frozen-factor gap
        diffs = table[:, 3]
        if np.all(diffs + 2.0 * table[:, 4] < 0):
            tag = CASE_LEADING_GAP
        else:
            tag = CASE_INDETERMINATE
            notes.append("unscaled gap not resolved below zero at every delta")
        if compute_gap0:
            m0 = model.with_delta(0.0)
            y0, _ = _samples(m0, utility, zo.pi0, start, T, cfg, grad)
            y1, _ = _samples(m0, utility, family.pi0_base, start, T, cfg, grad)
            g = y1 - y0
            gap0, gap0_se = float(np.mean(g)), _stderr(g)
        ell = -math.inf
        notes.append("scaled difference diverges like delta**(-1/2); ell_hat reported as -inf")
    elif np.isfinite(expo) and expo < divergence_threshold and ci[1] < 0:
        tag = CASE_DIVERGENT
    elif np.isfinite(expo) and expo > zero_threshold:
        tag = CASE_ZERO
    elif np.isfinite(expo):
        tag = CASE_FINITE
    else:
        tag = CASE_INDETERMINATE
        notes.append("scaled differences change sign or are partly unresolved; exponent not fitted")

    expected = _expected_tag(family)
    return OptimalityReport(
        deltas=d,
        per_delta_table=table,
        ell_hat=ell,
        ell_stderr=ell_se,
        ell_richardson=ell_r if tag != CASE_LEADING_GAP else -math.inf,
        case_tag=tag,
        expected_tag=expected,
        tag_consistent=tag == expected,
        exponent=expo,
        exponent_ci=ci,
        pathwise_zero=all_zero,
        never_significantly_positive=never_pos,
        gap0=gap0,
        gap0_stderr=gap0_se,
        notes=notes,
        baseline=cache,
    )
