"""Constant-coefficient Merton problem via the heat-equation representation.

For a frozen Sharpe ratio ``lam`` the marginal value ``M_x`` becomes a
solution of the backward heat equation after the monotone change of variables
``x = H(xi, t)``:

    H(xi, t) = E[ phi(xi + lam sqrt(T - t) u) ],   phi(xi) = I(exp(-xi)),  u ~ N(0, 1)

so that ``M_x(t, H(xi, t)) = exp(-xi - lam**2 (T - t) / 2)`` and the risk
tolerance is ``R(t, x) = H_x(H^{-1}(x, t), t)``. Everything is computed with the
heat variance ``tau = lam**2 (T - t)``.

``H`` and its first two derivatives are available in closed form for power and
inverse-marginal utilities; otherwise a shifted Gauss-Hermite rule is used and
the derivatives are taken under the integral sign.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._numerics import central_derivative, gauss_hermite, solve_increasing
from .errors import DomainError, OverflowGuardError, RangeError, ValidationError
from .utility import UtilitySpec

__all__ = [
    "SharpeContext",
    "MertonSolution",
    "ResidualReport",
    "heat_solve",
    "heat_invert",
    "merton_value",
    "risk_tolerance",
    "merton_strategy",
    "operator_residuals",
    "risk_tolerance_bounds",
]

_SHIFT_CLIP = 50.0


@dataclass(frozen=True)
class SharpeContext:
    """Frozen market: Sharpe ratio, volatility and horizon."""

    lam: float
    sigma: float = 1.0
    T: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.lam):
            raise ValidationError("Sharpe ratio must be finite", "lambda")
        if not self.sigma > 0:
            raise ValidationError("volatility must be positive", "sigma")
        if not self.T > 0:
            raise ValidationError("horizon must be positive", "T")


@dataclass(frozen=True)
class MertonSolution:
    """Heat representation of the Merton value function for one utility.

    Parameters
    ----------
    utility : UtilitySpec
    ctx : SharpeContext
    n_gh : int
        Gauss-Hermite nodes for the quadrature representation.
    force_quadrature : bool
        Evaluate ``H`` by quadrature even where a closed form exists.
    exp_cap : float
        Largest admissible ``log H`` returned in linear scale by :meth:`heat_solve`.
    """

    utility: UtilitySpec
    ctx: SharpeContext
    n_gh: int = 128
    force_quadrature: bool = False
    exp_cap: float = 700.0
    _nodes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_nodes", gauss_hermite(int(self.n_gh)))

    # ------------------------------------------------------------------
    @property
    def lam(self) -> float:
        return self.ctx.lam

    @property
    def T(self) -> float:
        return self.ctx.T

    @property
    def representation(self) -> str:
        probe = self.utility.heat_closed_form(0.0, 1.0)
        return "closed_form" if probe is not None and not self.force_quadrature else "quadrature"

    def with_lambda(self, lam: float) -> "MertonSolution":
        return MertonSolution(
            self.utility,
            SharpeContext(lam, self.ctx.sigma, self.ctx.T),
            self.n_gh,
            self.force_quadrature,
            self.exp_cap,
        )

    def heat_time(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.T * (1 + 1e-14)):
            raise DomainError(f"t must lie in [0, {self.T}]")
        return self.lam**2 * np.clip(self.T - t, 0.0, None)

    # ------------------------------------------------------------------
    # heat function in log form
    def log_heat(self, xi, tau):
        """Return ``(log H, H_x/H, H_xx/H)`` at heat coordinate ``xi`` and variance ``tau``."""
        xi, tau = np.broadcast_arrays(np.asarray(xi, float), np.asarray(tau, float))
        if not self.force_quadrature:
            closed = self.utility.heat_closed_form(xi, tau)
            if closed is not None:
                return closed
        out_l = np.empty(xi.shape)
        out_1 = np.empty(xi.shape)
        out_2 = np.empty(xi.shape)
        zero = tau <= 0
        if np.any(zero):
            l0, d1, d2 = self.utility.terminal_heat(xi[zero])
            out_l[zero], out_1[zero], out_2[zero] = l0, d1, d2
        if np.any(~zero):
            l0, d1, d2 = self._quadrature(xi[~zero], tau[~zero])
            out_l[~zero], out_1[~zero], out_2[~zero] = l0, d1, d2
        return out_l, out_1, out_2

    def _quadrature(self, xi, tau):
        u, logw = self._nodes
        sq = np.sqrt(tau)
        # Esscher shift centres the nodes on the mass of phi * density
        _, slope, _ = self.utility.terminal_heat(xi)
        c = np.clip(sq * slope, -_SHIFT_CLIP, _SHIFT_CLIP)[..., None]
        nodes = xi[..., None] + sq[..., None] * (u + c)
        lphi, d1, d2 = self.utility.terminal_heat(nodes)
        logterms = logw + lphi - c * u - 0.5 * c * c
        lse = logsumexp(logterms, axis=-1)
        p = np.exp(logterms - lse[..., None])
        return lse, np.sum(p * d1, axis=-1), np.sum(p * d2, axis=-1)

    # ------------------------------------------------------------------
    def heat_solve(self, x, t):
        """``H(x, t)`` in linear scale (``x`` is the heat coordinate)."""
        lh, _, _ = self.log_heat(x, self.heat_time(t))
        if np.any(lh > self.exp_cap):
            raise OverflowGuardError(f"log H = {float(np.max(lh)):.4g} exceeds cap {self.exp_cap}")
        out = np.exp(lh)
        return float(out) if out.ndim == 0 else out

    def heat_derivatives(self, x, t):
        """``(H, H_x, H_xx)`` at heat coordinate ``x``."""
        lh, r1, r2 = self.log_heat(x, self.heat_time(t))
        if np.any(lh > self.exp_cap):
            raise OverflowGuardError(f"log H = {float(np.max(lh)):.4g} exceeds cap {self.exp_cap}")
        h = np.exp(lh)
        return h, h * r1, h * r2

    def _invert_log(self, logy, tau):
        logy, tau = np.broadcast_arrays(np.asarray(logy, float), np.asarray(tau, float))
        a_lo, a_hi = self.utility.slope_bounds
        a = np.sqrt(a_lo * a_hi)
        x0 = (logy - 0.5 * a * a * tau) / a

        def f(xi):
            lh, r1, _ = self.log_heat(xi, tau)
            return lh, r1

        try:
            return solve_increasing(f, logy, x0, tol=1e-13, step0=1.0 / a)
        except ArithmeticError as exc:
            lo, _, _ = self.log_heat(np.full(tau.shape, -700.0 / a_lo), tau)
            hi, _, _ = self.log_heat(np.full(tau.shape, 700.0 / a_hi), tau)
            raise RangeError(
                f"target outside reachable range of H: {exc}",
                (float(np.exp(np.max(lo))), float(np.exp(np.min(hi)))),
            ) from None

    def heat_invert(self, y, t):
        """``H^{-1}(y, t)``: heat coordinate with ``H = y``."""
        y = np.asarray(y, float)
        if np.any(~(y > 0)) or np.any(~np.isfinite(y)):
            raise DomainError("y must be positive and finite")
        out = self._invert_log(np.log(y), self.heat_time(t))
        return float(out) if out.ndim == 0 else out

    # ------------------------------------------------------------------
    def _state(self, x, t, tau=None):
        x = np.asarray(x, float)
        if np.any(~(x > 0)):
            raise DomainError("wealth must be strictly positive")
        if tau is None:
            tau = self.heat_time(t)
        x, tau = np.broadcast_arrays(x, np.asarray(tau, float))
        xi0 = self._invert_log(np.log(x), tau)
        return x, tau, xi0

    def merton_value(self, x, t, *, tau=None):
        """``M(t, x)`` as the Gauss-Hermite expectation of ``U`` at the exact terminal wealth.

        ``tau`` overrides the heat variance ``lam**2 (T - t)`` (``t`` is then ignored).
        """
        x, tau, xi0 = self._state(x, t, tau)
        out = np.empty(x.shape)
        zero = tau <= 0
        if np.any(zero):
            out[zero] = np.asarray(self.utility.u(x[zero]))
        if np.any(~zero):
            out[~zero] = self._expected_utility(xi0[~zero] + tau[~zero], tau[~zero])
        return float(out) if out.ndim == 0 else out

    def _expected_utility(self, zeta0, tau):
        u, logw = self._nodes
        sq = np.sqrt(tau)
        w = np.exp(logw)
        # shift by the log-slope of U(phi(zeta)) when U is positive there
        lphi, d1, _ = self.utility.terminal_heat(zeta0)
        u0 = self.utility.utility_of_heat(zeta0)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            slope = np.exp(-zeta0 + lphi) * d1 / u0
        slope = np.where(np.isfinite(slope) & (u0 > 0), slope, 0.0)
        c = np.clip(sq * slope, 0.0, _SHIFT_CLIP)[..., None]
        nodes = zeta0[..., None] + sq[..., None] * (u + c)
        vals = self.utility.utility_of_heat(nodes)
        return np.sum(w * vals * np.exp(-c * u - 0.5 * c * c), axis=-1)

    def value_derivatives(self, x, t):
        """``(M, M_x, M_xx)`` using ``M_x = exp(-xi0 - tau/2)`` and ``M_xx = -M_x / R``."""
        x, tau, xi0 = self._state(x, t)
        m = np.asarray(self.merton_value(x, t))
        _, r1, _ = self.log_heat(xi0, tau)
        mx = np.exp(-xi0 - 0.5 * tau)
        return m, mx, -mx / (x * r1)

    def risk_tolerance(self, x, t, *, tau=None):
        """``R(t, x) = H_x(H^{-1}(x, t), t)``."""
        x, tau, xi0 = self._state(x, t, tau)
        _, r1, _ = self.log_heat(xi0, tau)
        out = x * r1
        return float(out) if out.ndim == 0 else out

    def risk_tolerance_x(self, x, t):
        """``R_x(t, x) = H_xx / H_x`` at ``H^{-1}(x, t)``."""
        x, tau, xi0 = self._state(x, t)
        _, r1, r2 = self.log_heat(xi0, tau)
        out = r2 / r1
        return float(out) if out.ndim == 0 else out

    def merton_strategy(self, x, t):
        """Optimal amount in the risky asset, ``(lam/sigma) R(t, x)``."""
        out = (self.lam / self.ctx.sigma) * np.asarray(self.risk_tolerance(x, t))
        return float(out) if out.ndim == 0 else out

    def exact_wealth(self, x, t, s, gaussians):
        """Exact optimal wealth at time ``s`` started from ``x`` at ``t``.

        ``gaussians`` are standard normal draws (``(W_s - W_t)/sqrt(s - t)``).
        """
        if not (0 <= t <= s <= self.T):
            raise DomainError("require 0 <= t <= s <= T")
        g = np.asarray(gaussians, float)
        xi0 = self.heat_invert(x, t)
        lam = self.lam
        arg = xi0 + lam**2 * (s - t) + lam * np.sqrt(s - t) * g
        lh, _, _ = self.log_heat(arg, self.heat_time(s))
        return np.exp(lh)


# ---------------------------------------------------------------------------
# functional API
# ---------------------------------------------------------------------------


def heat_solve(sol: MertonSolution, x, t):
    return sol.heat_solve(x, t)


def heat_invert(sol: MertonSolution, y, t):
    return sol.heat_invert(y, t)


def merton_value(sol: MertonSolution, x, t):
    return sol.merton_value(x, t)


def risk_tolerance(sol: MertonSolution, x, t):
    return sol.risk_tolerance(x, t)


def merton_strategy(sol: MertonSolution, x, t):
    return sol.merton_strategy(x, t)


@dataclass(frozen=True)
class ResidualReport:
    """Finite-difference residuals of the Merton PDE and its sensitivity identities.

    Each array has one entry per grid point and is normalized by ``|M|``
    (PDE, Vega-Gamma) or ``|R|`` (risk-tolerance identity).
    """

    t: np.ndarray
    x: np.ndarray
    pde: np.ndarray
    vega_gamma: np.ndarray
    r_lambda: np.ndarray

    @property
    def max_pde(self) -> float:
        return float(np.max(np.abs(self.pde)))

    @property
    def max_vega_gamma(self) -> float:
        return float(np.max(np.abs(self.vega_gamma)))

    @property
    def max_r_lambda(self) -> float:
        return float(np.max(np.abs(self.r_lambda)))

    def summary(self) -> dict:
        return {
            "max_pde_residual": self.max_pde,
            "max_vega_gamma_residual": self.max_vega_gamma,
            "max_r_lambda_residual": self.max_r_lambda,
        }


def operator_residuals(sol: MertonSolution, t, x, *, rel_step: float = 1e-3) -> ResidualReport:
    """Finite-difference residuals at interior points ``(t, x)``.

    (a) ``M_t - lam**2 M_x**2 / (2 M_xx)``,
    (b) ``M_lam + (T - t) lam R**2 M_xx`` and
    (c) ``R_lam - (T - t) lam R**2 R_xx``.
    All derivatives are central differences with one Richardson step applied
    to the representation itself (``M`` and ``R``), so the checks are
    independent of the analytic derivative formulas.
    """
    t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
    t = t.ravel()
    x = x.ravel()
    T = sol.T
    if np.any(t >= T) or np.any(t < 0) or np.any(x <= 0):
        raise DomainError("operator residuals need interior points 0 <= t < T, x > 0")
    lam = sol.lam

    hx = rel_step * x
    ht = np.minimum(rel_step * T, (T - t) / 4.0)
    hl = rel_step * max(abs(lam), 1.0)
    # M depends on t only through T - t; shifting the horizon lets the time
    # stencil straddle t = 0 without leaving the domain
    shifted = MertonSolution(sol.utility, SharpeContext(lam, sol.ctx.sigma, T + 1.0), sol.n_gh, sol.force_quadrature)

    def m_of_x(xx):
        return np.asarray(sol.merton_value(xx, t))

    def m_of_t(tt):
        return np.asarray(shifted.merton_value(x, tt + 1.0))

    def r_of_x(xx):
        return np.asarray(sol.risk_tolerance(xx, t))

    # M and R depend on lam only through the heat variance lam**2 (T - t)
    def m_of_l(ll):
        return np.asarray(sol.merton_value(x, None, tau=ll**2 * (T - t)))

    def r_of_l(ll):
        return np.asarray(sol.risk_tolerance(x, None, tau=ll**2 * (T - t)))

    m = m_of_x(x)
    m_t = central_derivative(m_of_t, t, 1, h=ht)
    m_x = central_derivative(m_of_x, x, 1, h=hx)
    m_xx = central_derivative(m_of_x, x, 2, h=hx)
    pde = (m_t - 0.5 * lam**2 * m_x**2 / m_xx) / np.abs(m)

    r = r_of_x(x)
    lam_arr = np.full(x.shape, lam)
    m_l = central_derivative(m_of_l, lam_arr, 1, h=hl)
    vg = (m_l + (T - t) * lam * r**2 * m_xx) / np.abs(m)

    r_xx = central_derivative(r_of_x, x, 2, h=hx)
    r_l = central_derivative(r_of_l, lam_arr, 1, h=hl)
    rl = (r_l - (T - t) * lam * r**2 * r_xx) / np.abs(r)
    return ResidualReport(t=t, x=x, pde=pde, vega_gamma=vg, r_lambda=rl)


def risk_tolerance_bounds(sol: MertonSolution, t, x, *, rel_step: float = 1e-3) -> np.ndarray:
    """Empirical ``sup |R**j d^{j+1}R/dx^{j+1}|`` for ``j = 0, 1, 2`` on the grid at time ``t``."""
    x = np.asarray(x, float)

    def r_of_x(xx):
        return np.asarray(sol.risk_tolerance(xx, t))

    r = r_of_x(x)
    out = []
    for j in range(3):
        d = central_derivative(r_of_x, x, j + 1, rel_step=None if j else rel_step)
        out.append(float(np.max(np.abs(r**j * d))))
    return np.array(out)
