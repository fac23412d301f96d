"""First-order value expansion under a slowly varying factor.

With the factor frozen at ``z`` and ``lam = lam(z)``:

* ``v0(t, x) = M(t, x; lam)``
* ``v0_z = (T - t) lam lam' R v0_x``  and  ``v0_xz = (T - t) lam lam' v0_x (R_x - 1)``
* ``v1 = (T - t) rho lam g R v0_xz / 2``
* ``pi0 = (lam / sigma) R``

plus the correction terms for perturbed strategy families: ``vtilde_2alpha``
(Feynman-Kac over the exact Merton wealth, or a closed form for power utility
with a proportional perturbation) and ``vtilde1 = v1 + vtilde_2alpha``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline

from .dynamics import MarketModel, StrategyFamily
from .errors import DomainError, ValidationError
from .merton import MertonSolution, SharpeContext
from .utility import Power, UtilitySpec

__all__ = [
    "SlowFactorFrozen",
    "ExpansionResult",
    "Estimate",
    "ApproximationDescriptor",
    "ZerothOrder",
    "v0_eval",
    "v0_x_eval",
    "v0_xx_eval",
    "v0_z_eval",
    "v0_xz_eval",
    "v1_eval",
    "pi0_eval",
    "vtilde_2alpha_eval",
    "vtilde1_quarter_eval",
    "approximation_select",
    "expand",
]


@dataclass(frozen=True)
class SlowFactorFrozen:
    """Model coefficients evaluated at a frozen factor level ``z``.

    ``sigma_fn`` and ``mu_fn`` are only needed for strategies (``pi0``) and
    Feynman-Kac sources; the value expansion itself depends on ``lam``,
    ``lam'`` and ``g``.
    """

    z: float
    lambda_fn: Callable
    lambda_prime_fn: Callable
    g_fn: Callable
    rho: float
    T: float = 1.0
    sigma_fn: Optional[Callable] = None

    def __post_init__(self):
        if not (-1.0 < self.rho < 1.0):
            raise ValidationError("correlation must satisfy |rho| < 1", "model.rho")
        if not self.T > 0:
            raise ValidationError("horizon must be positive", "T")
        for name, val in (("lambda", self.lam), ("lambda'", self.lam_prime), ("g", self.g)):
            if not np.isfinite(val):
                raise DomainError(f"{name} is not finite at z = {self.z}")

    @classmethod
    def from_model(cls, model: MarketModel, z: float, T: float) -> "SlowFactorFrozen":
        return cls(
            z=float(z),
            lambda_fn=model.lam,
            lambda_prime_fn=model.lam_prime,
            g_fn=model.g_fn,
            rho=model.rho,
            T=float(T),
            sigma_fn=model.sigma_fn,
        )

    def at(self, z: float) -> "SlowFactorFrozen":
        return SlowFactorFrozen(float(z), self.lambda_fn, self.lambda_prime_fn, self.g_fn, self.rho, self.T, self.sigma_fn)

    @property
    def lam(self) -> float:
        return float(self.lambda_fn(self.z))

    @property
    def lam_prime(self) -> float:
        return float(self.lambda_prime_fn(self.z))

    @property
    def g(self) -> float:
        return float(self.g_fn(self.z))

    @property
    def sigma(self) -> float:
        if self.sigma_fn is None:
            return 1.0
        return float(self.sigma_fn(self.z))

    def merton(self, utility: UtilitySpec, n_gh: int = 128) -> MertonSolution:
        return MertonSolution(utility, SharpeContext(self.lam, self.sigma, self.T), n_gh)


def _out(a):
    a = np.asarray(a, float)
    return float(a) if a.ndim == 0 else a


def _pieces(frozen: SlowFactorFrozen, utility: UtilitySpec, t, x, n_gh=128):
    """``(tau, v0_x, R, R_x)`` at ``(t, x)`` for the frozen Sharpe ratio."""
    sol = frozen.merton(utility, n_gh)
    x, tau, xi0 = sol._state(x, t)
    _, r1, r2 = sol.log_heat(xi0, tau)
    mx = np.exp(-xi0 - 0.5 * tau)
    return sol, tau, mx, x * r1, r2 / r1


def _horizon(frozen, t):
    t = np.asarray(t, float)
    if np.any(t < 0) or np.any(t > frozen.T):
        raise DomainError(f"t must lie in [0, {frozen.T}]")
    return frozen.T - t


def v0_eval(frozen: SlowFactorFrozen, utility: UtilitySpec, t, x, n_gh: int = 128):
    """Zeroth-order value ``M(t, x; lam(z))``."""
    return frozen.merton(utility, n_gh).merton_value(x, t)


def v0_x_eval(frozen, utility, t, x, n_gh: int = 128):
    _, _, mx, _, _ = _pieces(frozen, utility, t, x, n_gh)
    return _out(mx)


def v0_xx_eval(frozen, utility, t, x, n_gh: int = 128):
    _, _, mx, r, _ = _pieces(frozen, utility, t, x, n_gh)
    return _out(-mx / r)


def v0_z_eval(frozen: SlowFactorFrozen, utility: UtilitySpec, t, x, n_gh: int = 128):
    """``v0_z = -(T - t) lam lam' R**2 v0_xx = (T - t) lam lam' R v0_x``."""
    tt = _horizon(frozen, t)
    _, _, mx, r, _ = _pieces(frozen, utility, t, x, n_gh)
    return _out(tt * frozen.lam * frozen.lam_prime * r * mx)


def v0_xz_eval(frozen, utility, t, x, n_gh: int = 128):
    """``v0_xz = (T - t) lam lam' (R_x v0_x + R v0_xx) = (T - t) lam lam' v0_x (R_x - 1)``."""
    tt = _horizon(frozen, t)
    _, _, mx, _, rx = _pieces(frozen, utility, t, x, n_gh)
    return _out(tt * frozen.lam * frozen.lam_prime * mx * (rx - 1.0))


def v1_eval(frozen: SlowFactorFrozen, utility: UtilitySpec, t, x, n_gh: int = 128):
    """First-order correction ``v1 = (T - t) rho lam g R v0_xz / 2``."""
    tt = _horizon(frozen, t)
    _, _, mx, r, rx = _pieces(frozen, utility, t, x, n_gh)
    lam = frozen.lam
    v0xz = tt * lam * frozen.lam_prime * mx * (rx - 1.0)
    return _out(0.5 * tt * frozen.rho * lam * frozen.g * r * v0xz)


def pi0_eval(frozen: SlowFactorFrozen, utility: UtilitySpec, t, x, n_gh: int = 128):
    """Zeroth-order strategy ``(lam/sigma) R(t, x; lam)`` (amount in the risky asset)."""
    return frozen.merton(utility, n_gh).merton_strategy(x, t)


@dataclass(frozen=True)
class Estimate:
    """A value with its Monte Carlo standard error (0 for closed forms)."""

    value: float
    stderr: float
    method: str
    n_paths: int = 0
    budget_warning: bool = False

    def __float__(self):
        return float(self.value)


def vtilde_2alpha_eval(
    frozen: SlowFactorFrozen,
    utility: UtilitySpec,
    family: StrategyFamily,
    t: float,
    x: float,
    *,
    n_paths: int = 20_000,
    n_times: int = 64,
    seed: int = 0,
    target_stderr: float | None = None,
    force_mc: bool = False,
    n_gh: int = 128,
) -> Estimate:
    """Correction ``vtilde_2alpha = E[int_t^T sigma^2 (pi1)^2 v0_xx / 2 ds]`` along the Merton wealth.

    Closed form for power utility when ``pi1 = c * pi0``:
    ``-c**2 lam**2 gamma (T - t) v0 / (2 (1 - gamma))``. Otherwise Monte Carlo
    with the exact optimal-wealth sampler and the trapezoidal rule on
    ``n_times`` equally spaced times.
    """
    if not family.identical_to_pi0:
        raise ValidationError("vtilde_2alpha requires a family whose base strategy equals pi0", "study.family")
    tt = float(_horizon(frozen, t))
    if tt == 0.0 or family.pi1_scale == 0.0:
        return Estimate(0.0, 0.0, "trivial")
    lam = frozen.lam
    if not force_mc and isinstance(utility, Power) and family.pi1_scale is not None:
        g = utility.gamma
        v0 = float(v0_eval(frozen, utility, t, x, n_gh))
        c = family.pi1_scale
        return Estimate(-0.5 * c * c * lam * lam * g * tt * v0 / (1.0 - g), 0.0, "closed_form")
    if n_times < 2:
        raise ValidationError("n_times must be at least 2", "study.n_times")

    sol = frozen.merton(utility, n_gh)
    sigma = frozen.sigma
    xi0 = sol.heat_invert(x, t)
    times = t + tt * np.linspace(0.0, 1.0, n_times)
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0x7A11], dtype=np.uint64)))
    half = n_paths // 2
    inc = rng.standard_normal((n_times - 1, half)) * np.sqrt(np.diff(times))[:, None]
    inc = np.concatenate([inc, -inc], axis=1)  # antithetic pairs
    w = np.vstack([np.zeros((1, inc.shape[1])), np.cumsum(inc, axis=0)])
    zvec = np.full(inc.shape[1], frozen.z)
    vals = np.empty_like(w)
    quad = sol.representation == "quadrature"
    for j, s in enumerate(times):
        zeta = xi0 + lam * lam * (s - t) + lam * w[j]
        tau = lam * lam * (frozen.T - s)
        if quad and zeta.size > 2048 and np.ptp(zeta) > 0:
            grid = np.linspace(zeta.min(), zeta.max(), 1025)
            lh_g, r1_g, _ = sol.log_heat(grid, tau)
            lh = CubicSpline(grid, lh_g)(zeta)
            r1 = CubicSpline(grid, r1_g)(zeta)
        else:
            lh, r1, _ = sol.log_heat(zeta, tau)
        xs = np.exp(lh)
        v0xx = -np.exp(-zeta - 0.5 * tau) / (xs * r1)
        p1 = np.asarray(family.pi1_perturb(s, xs, zvec), float)
        vals[j] = 0.5 * sigma**2 * p1**2 * v0xx
    dt = np.diff(times)[:, None]
    integral = np.sum(0.5 * (vals[1:] + vals[:-1]) * dt, axis=0)
    # antithetic pairs are averaged before the standard error
    pairs = 0.5 * (integral[:half] + integral[half:])
    mean = float(pairs.mean())
    se = float(pairs.std(ddof=1) / math.sqrt(half))
    warn = target_stderr is not None and se > target_stderr
    return Estimate(mean, se, "monte_carlo", n_paths=2 * half, budget_warning=warn)


def vtilde1_quarter_eval(frozen, utility, family: StrategyFamily, t, x, **mc) -> Estimate:
    """``vtilde1 = v1 + vtilde_2alpha`` for ``alpha = 1/4`` (linear superposition of sources)."""
    if not math.isclose(family.alpha, 0.25, rel_tol=0, abs_tol=1e-12):
        raise ValidationError("vtilde1 is defined for alpha = 1/4", "study.alpha")
    v1 = float(v1_eval(frozen, utility, t, x))
    vt = vtilde_2alpha_eval(frozen, utility, family, t, x, **mc)
    return Estimate(v1 + vt.value, vt.stderr, vt.method, vt.n_paths, vt.budget_warning)


@dataclass(frozen=True)
class ExpansionResult:
    """Evaluators of the expansion at a frozen factor level."""

    v0: Callable
    v1: Callable
    pi0: Callable
    extra: Optional[Callable] = None
    extra_tag: Optional[str] = None


def expand(frozen: SlowFactorFrozen, utility: UtilitySpec, family: StrategyFamily | None = None) -> ExpansionResult:
    """Bundle the expansion evaluators; ``extra`` is ``vtilde1`` (alpha = 1/4) or ``vtilde_2alpha`` (alpha < 1/4)."""
    extra = tag = None
    if family is not None and family.identical_to_pi0:
        if math.isclose(family.alpha, 0.25, abs_tol=1e-12):
            extra, tag = (lambda t, x: vtilde1_quarter_eval(frozen, utility, family, t, x)), "vtilde1"
        elif family.alpha < 0.25:
            extra, tag = (lambda t, x: vtilde_2alpha_eval(frozen, utility, family, t, x)), "vtilde_2alpha"
    return ExpansionResult(
        v0=lambda t, x: v0_eval(frozen, utility, t, x),
        v1=lambda t, x: v1_eval(frozen, utility, t, x),
        pi0=lambda t, x: pi0_eval(frozen, utility, t, x),
        extra=extra,
        extra_tag=tag,
    )


# ---------------------------------------------------------------------------
# approximation tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ApproximationDescriptor:
    """Which expansion approximates the perturbed value, and how accurately.

    ``accuracy_order`` is the exponent ``q`` of the error bound ``O(delta**q)``.
    """

    expansion: str
    accuracy_order: float
    region: str
    alpha: float
    identical: bool
    indeterminate: bool = False
    note: str = ""


def _forward_sample(fn, point, T, x_grid, n_time):
    t, x, z = point
    us = np.linspace(t, T, n_time)
    xs = np.asarray(x_grid if x_grid is not None else x * np.logspace(-2, 2, 41), float)
    uu, xx = np.meshgrid(us, xs, indexing="ij")
    vals = np.asarray(fn(uu.ravel(), xx.ravel(), np.full(uu.size, z)), float)
    if vals.ndim == 0:
        vals = np.full(uu.size, float(vals))
    return vals, xx.ravel()


def _identical_rows(alpha, region_k1: bool | None):
    if alpha >= 0.5:
        return "v0+sqrt(delta)*v1", 1.0, "all"
    if alpha > 0.25 + 1e-12:
        return "v0+sqrt(delta)*v1", 2.0 * alpha, "all"
    if abs(alpha - 0.25) <= 1e-12:
        return "v0+sqrt(delta)*vtilde1", 0.75, "all"
    if region_k1:
        return "v0+delta^(2alpha)*vtilde_2alpha", min(3.0 * alpha, 0.5), "K1"
    return "v0+sqrt(delta)*v1", 1.0, "C1"


def approximation_select(
    family: StrategyFamily,
    point: tuple[float, float, float],
    *,
    pi0: Callable | None = None,
    T: float = 1.0,
    x_grid=None,
    n_time: int = 33,
    threshold: float = 1e-12,
    noise_floor: float = 1e-8,
) -> ApproximationDescriptor:
    """Select the applicable expansion of the perturbed value at ``point = (t, x, z)``.

    The identical-to-pi0 flag is trusted when set. Otherwise ``pi0_base - pi0``
    is sampled on a forward grid ``u in [t, T]`` times a wealth grid: values
    above ``noise_floor`` (relative to ``|pi0|``) place the point in the region
    where the leading terms differ, values below ``threshold`` place it in the
    complementary region, and anything in between is reported as
    indeterminate. The same sampling of ``pi1_perturb`` separates the regions
    used when ``alpha < 1/4``.
    """
    alpha = float(family.alpha)
    t, x, z = point
    if not (0 <= t <= T):
        raise DomainError("point time outside [0, T]")

    def k1_test():
        vals, xs = _forward_sample(family.pi1_perturb, point, T, x_grid, n_time)
        scale = np.maximum(np.abs(xs), 1.0)
        mx = float(np.max(np.abs(vals) / scale))
        if mx <= threshold:
            return False
        if mx < noise_floor:
            return None
        return True

    if family.identical_to_pi0:
        k1 = k1_test() if alpha < 0.25 - 1e-12 else False
        if k1 is None:
            return ApproximationDescriptor("indeterminate", math.nan, "K1?", alpha, True, True, "pi1 near noise floor")
        name, order, region = _identical_rows(alpha, k1)
        return ApproximationDescriptor(name, order, region, alpha, True)

    if pi0 is None:
        raise ValidationError("pi0 evaluator required to test the region of a non-identical family", "study.family")

    def diff(u, xx, zz):
        return np.asarray(family.pi0_base(u, xx, zz)) - np.asarray(pi0(u, xx, zz))

    vals, xs = _forward_sample(diff, point, T, x_grid, n_time)
    ref, _ = _forward_sample(pi0, point, T, x_grid, n_time)
    rel = np.abs(vals) / np.maximum(np.abs(ref), 1e-300)
    mx = float(np.max(np.where(np.abs(vals) <= threshold, 0.0, rel)))
    if mx >= noise_floor:
        return ApproximationDescriptor("vtilde0", min(alpha, 0.5), "K", alpha, False)
    if mx > 0.0:
        return ApproximationDescriptor("indeterminate", math.nan, "K?", alpha, False, True, "pi0 difference near noise floor")
    k1 = k1_test() if alpha < 0.25 - 1e-12 else False
    if k1 is None:
        return ApproximationDescriptor("indeterminate", math.nan, "C and K1?", alpha, False, True, "pi1 near noise floor")
    name, order, region = _identical_rows(alpha, k1)
    return ApproximationDescriptor(name, order, "C" if region == "all" else "C and " + region, alpha, False)


# ---------------------------------------------------------------------------
# vectorized zeroth-order objects for simulation
# ---------------------------------------------------------------------------


_TABLE_LNX = (-12.0, 12.0)
_TABLE_N_LNX = 481
_TABLE_N_TAU = 33
_TABLE_N_XI = 401


@dataclass(frozen=True)
class ZerothOrder:
    """Zeroth-order strategy and value gradient with a per-path factor level.

    ``pi0(t, x, z)`` and ``gradient(t, x, z) -> (v0_x, v0_z)`` accept arrays
    of wealth and factor levels (one per path); the heat variance
    ``lam(z)**2 (T - t)`` is formed per path so a single Merton solution with
    unit Sharpe ratio serves all levels. Power utility uses closed forms.

    Utilities without a closed-form heat function would need a nested root
    solve per path and step. With ``tabulate`` the heat coordinate
    ``xi0 = H^{-1}(x)`` and ``log(R/x)`` are tabulated once on a
    ``(tau, log x)`` grid and evaluated by bicubic splines (relative error of
    order 1e-8); points outside the table fall back to exact inversion.
    """

    model: MarketModel
    utility: UtilitySpec
    T: float
    kappa: float = 1.0
    n_gh: int = 128
    tabulate: bool = True
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False, compare=False)

    def _sol(self):
        sol = self._cache.get("sol")
        if sol is None:
            sol = MertonSolution(self.utility, SharpeContext(1.0, 1.0, self.T), self.n_gh)
            self._cache["sol"] = sol
        return sol

    def _build_table(self, sol, tau_max):
        lo, hi = _TABLE_LNX
        taus = np.linspace(0.0, tau_max, _TABLE_N_TAU)
        lnx = np.linspace(lo, hi, _TABLE_N_LNX)
        ends = sol._invert_log(np.tile([lo - 0.5, hi + 0.5], (_TABLE_N_TAU, 1)), taus[:, None])
        xi_tab = np.empty((_TABLE_N_TAU, _TABLE_N_LNX))
        lr_tab = np.empty_like(xi_tab)
        for i, tau in enumerate(taus):
            xs = np.linspace(ends[i, 0], ends[i, 1], _TABLE_N_XI)
            lh, r1, _ = sol.log_heat(xs, tau)
            xi_tab[i] = CubicSpline(lh, xs)(lnx)
            lr_tab[i] = np.log(CubicSpline(xs, r1)(xi_tab[i]))
        return {
            "tau_max": tau_max,
            "xi": RectBivariateSpline(taus, lnx, xi_tab),
            "log_r1": RectBivariateSpline(taus, lnx, lr_tab),
        }

    def _table(self, sol, tau_needed):
        with self._lock:
            tab = self._cache.get("table")
            if tab is None or tab["tau_max"] < tau_needed:
                prev = 0.0 if tab is None else 2.0 * tab["tau_max"]
                tab = self._build_table(sol, max(tau_needed, prev, 1e-6))
                self._cache["table"] = tab
            return tab

    def _heat_state(self, xs, tau):
        """``(xi0, R/x)`` at wealth ``xs`` (positive) and heat variance ``tau``."""
        sol = self._sol()
        xs, tau = np.broadcast_arrays(np.asarray(xs, float), np.asarray(tau, float))
        if self.tabulate and sol.representation == "quadrature" and xs.size > 64:
            lnx = np.log(xs)
            tab = self._table(sol, float(np.max(tau)))
            inside = (lnx >= _TABLE_LNX[0]) & (lnx <= _TABLE_LNX[1])
            xi0 = np.empty(xs.shape)
            r1 = np.empty(xs.shape)
            xi0[inside] = tab["xi"].ev(tau[inside], lnx[inside])
            r1[inside] = np.exp(tab["log_r1"].ev(tau[inside], lnx[inside]))
            out = ~inside
            if out.any():
                _, tb, xo = sol._state(xs[out], None, tau[out])
                xi0[out] = xo
                r1[out] = sol.log_heat(xo, tb)[1]
            return xi0, r1
        _, tb, xi0 = sol._state(xs, None, tau)
        return xi0, sol.log_heat(xi0, tb)[1]

    def pi0(self, t, x, z):
        x = np.asarray(x, float)
        z = np.asarray(z, float)
        lam = np.asarray(self.model.lam(z), float)
        ratio = lam / np.asarray(self.model.sigma_fn(z), float)
        if isinstance(self.utility, Power):
            return self.kappa * ratio * x / (1.0 - self.utility.gamma)
        pos = x > 0
        xs = np.where(pos, x, 1.0)
        tau = lam**2 * max(self.T - float(t), 0.0)
        _, r1 = self._heat_state(xs, tau)
        return np.where(pos, self.kappa * ratio * xs * r1, 0.0)

    __call__ = pi0

    def gradient(self, t, x, z):
        x = np.asarray(x, float)
        z = np.asarray(z, float)
        pos = x > 0
        xs = np.where(pos, x, 1.0)
        tt = max(self.T - float(t), 0.0)
        lam = np.asarray(self.model.lam(z), float)
        lamp = np.asarray(self.model.lam_prime(z), float)
        tau = np.broadcast_to(lam**2 * tt, xs.shape)
        if isinstance(self.utility, Power):
            g = self.utility.gamma
            e = np.exp(0.5 * tau * g / (1.0 - g))
            mx = xs ** (g - 1.0) * e
            r = xs / (1.0 - g)
        else:
            xi0, r1 = self._heat_state(xs, tau)
            mx = np.exp(-xi0 - 0.5 * tau)
            r = xs * r1
        vz = tt * lam * lamp * r * mx
        return np.where(pos, mx, 0.0), np.where(pos, vz, 0.0)

    def value(self, t, x, z):
        x = np.asarray(x, float)
        z = np.asarray(z, float)
        lam = np.asarray(self.model.lam(z), float)
        tau = lam**2 * max(self.T - float(t), 0.0)
        if isinstance(self.utility, Power):
            g = self.utility.gamma
            return x**g / g * np.exp(0.5 * tau * g / (1.0 - g))
        return np.asarray(self._sol().merton_value(x, None, tau=np.broadcast_to(tau, np.shape(x))))
