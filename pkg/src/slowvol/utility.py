"""Admissible utility classes and their derived quantities.

Four classes are supported:

* :class:`Power` -- ``U(x) = x**gamma / gamma``
* :class:`MixturePowers` -- ``U(x) = sum_i c_i x**gamma_i / gamma_i``
* :class:`PowerMeasure` -- ``U(x) = sum_j w_j x**y_j`` for a discrete measure on ``(0, 1)``
* :class:`InverseMarginalMeasure` -- defined through its inverse marginal
  ``I(y) = sum_j w_j y**(-s_j)``

Besides ``U``, ``U'``, ``U''`` and ``I`` every class exposes the terminal risk
tolerance ``R(x) = -U'(x)/U''(x)`` and its slope, plus the "heat coordinate"
helpers used by :mod:`slowvol.merton`: with ``phi(xi) = I(exp(-xi))`` one has
``phi' = R(phi)`` and ``phi'' = R'(phi) R(phi)``.

All computations for the power classes are done in ``log x`` with
log-sum-exp reductions so that very small and very large wealth levels stay
finite.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from ._numerics import central_derivative, solve_increasing, weighted_logsumexp
from .errors import DomainError, ValidationError

__all__ = [
    "UtilitySpec",
    "Power",
    "MixturePowers",
    "PowerMeasure",
    "InverseMarginalMeasure",
    "RiskProfile",
    "Assumption1Report",
    "u_eval",
    "inverse_marginal",
    "risk_tolerance_terminal",
    "assumption1_check",
    "utility_from_params",
    "IMM_X_MIN",
]

#: Lower integration limit used to normalize ``U`` for inverse-marginal
#: measures whose ``U(0+)`` is not finite.
IMM_X_MIN = 1e-12


def _as_positive(x, name="x"):
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError(f"{name} must be strictly positive")
    return arr


def _ret(arr):
    arr = np.asarray(arr, dtype=float)
    return float(arr) if arr.ndim == 0 else arr


def _tuple(values, name) -> tuple[float, ...]:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError(f"{name} must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must be finite")
    return tuple(float(v) for v in arr)


class UtilitySpec(ABC):
    """Common interface of the admissible utility classes."""

    # -- primal quantities --------------------------------------------------
    @abstractmethod
    def u(self, x):
        """Utility ``U(x)``."""

    @abstractmethod
    def du(self, x):
        """Marginal utility ``U'(x)``."""

    @abstractmethod
    def d2u(self, x):
        """Second derivative ``U''(x)``."""

    @abstractmethod
    def inverse_marginal(self, y):
        """Inverse marginal utility ``I(y)`` with ``U'(I(y)) = y``."""

    @abstractmethod
    def risk_tolerance(self, x):
        """Terminal risk tolerance ``R(x) = -U'(x)/U''(x)``."""

    @abstractmethod
    def risk_tolerance_prime(self, x):
        """Slope ``R'(x)``."""

    def arrow_pratt(self, x):
        """Relative risk aversion ``-x U''(x)/U'(x) = x/R(x)``."""
        x = _as_positive(x)
        return _ret(x / np.asarray(self.risk_tolerance(x)))

    # -- heat coordinates ---------------------------------------------------
    @abstractmethod
    def terminal_heat(self, xi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(log phi, phi'/phi, phi''/phi)`` at ``xi`` for ``phi(xi) = I(exp(-xi))``."""

    @abstractmethod
    def utility_of_heat(self, zeta) -> np.ndarray:
        """Return ``U(I(exp(-zeta)))``."""

    def heat_closed_form(self, xi, tau):
        """Closed-form heat solution in log form, or ``None``.

        Returns ``(log H, H_x/H, H_xx/H)`` where ``H(xi, tau)`` is the
        Gaussian smoothing of ``phi`` with variance ``tau``.
        """
        return None

    @property
    @abstractmethod
    def slope_bounds(self) -> tuple[float, float]:
        """Bounds ``(a_lo, a_hi)`` on ``d log phi / d xi`` (both positive)."""

    @property
    def kind(self) -> str:
        return type(self).__name__


# ---------------------------------------------------------------------------
# power classes
# ---------------------------------------------------------------------------


class _AtomicPower(UtilitySpec):
    """``U(x) = sum_j w_j x**y_j`` with ``0 < y_j < 1`` and ``w_j > 0``."""

    @property
    @abstractmethod
    def atoms(self) -> tuple[np.ndarray, np.ndarray]:
        """Exponents ``y_j`` and weights ``w_j`` of ``U = sum w_j x**y_j``."""

    # log U'(x) = logsumexp(log(w y) + (y - 1) log x)
    def _log_marginal(self, logx):
        y, w = self.atoms
        terms = np.log(w * y) + (y - 1.0) * logx[..., None]
        lse, (m1, v2) = weighted_logsumexp(terms, values=[1.0 - y, (1.0 - y) ** 2])
        return lse, m1, v2

    def u(self, x):
        x = _as_positive(x)
        y, w = self.atoms
        return _ret(np.exp(logsumexp(np.log(w) + y * np.log(x)[..., None], axis=-1)))

    def du(self, x):
        x = _as_positive(x)
        lse, _, _ = self._log_marginal(np.log(x))
        return _ret(np.exp(lse))

    def d2u(self, x):
        x = _as_positive(x)
        lse, m1, _ = self._log_marginal(np.log(x))
        return _ret(-np.exp(lse) * m1 / x)

    def _log_inverse_marginal(self, logy):
        y, w = self.atoms
        logy = np.asarray(logy, float)
        k = int(np.argmax(w * y))
        x0 = (logy - np.log(w[k] * y[k])) / (y[k] - 1.0)

        def f(lx):
            lse, m1, _ = self._log_marginal(lx)
            return -lse, m1

        return solve_increasing(f, -logy, x0, tol=1e-14)

    def inverse_marginal(self, y):
        y = _as_positive(y, "y")
        return _ret(np.exp(self._log_inverse_marginal(np.log(y))))

    def risk_tolerance(self, x):
        x = _as_positive(x)
        _, m1, _ = self._log_marginal(np.log(x))
        return _ret(x / m1)

    def risk_tolerance_prime(self, x):
        x = _as_positive(x)
        _, m1, v2 = self._log_marginal(np.log(x))
        return _ret(-1.0 + (m1 + v2) / m1**2)

    def terminal_heat(self, xi):
        xi = np.asarray(xi, float)
        logphi = self._log_inverse_marginal(-xi)
        _, m1, v2 = self._log_marginal(logphi)
        d1 = 1.0 / m1
        rprime = -1.0 + (m1 + v2) / m1**2
        return logphi, d1, rprime * d1

    def utility_of_heat(self, zeta):
        y, w = self.atoms
        logphi = self._log_inverse_marginal(-np.asarray(zeta, float))
        return np.exp(logsumexp(np.log(w) + y * logphi[..., None], axis=-1))

    @property
    def slope_bounds(self):
        y, _ = self.atoms
        return 1.0 / (1.0 - y.min()), 1.0 / (1.0 - y.max())


@dataclass(frozen=True)
class Power(_AtomicPower):
    """Power utility ``x**gamma / gamma`` with ``0 < gamma < 1``."""

    gamma: float

    def __post_init__(self):
        g = float(self.gamma)
        if not (0.0 < g < 1.0):
            raise ValidationError(
                "power exponent must lie strictly inside (0, 1); logarithmic and "
                "negative-power utilities are not supported",
                "utility.gamma",
            )
        object.__setattr__(self, "gamma", g)

    @property
    def atoms(self):
        return np.array([self.gamma]), np.array([1.0 / self.gamma])

    @property
    def a(self) -> float:
        """Heat slope ``1/(1 - gamma)``."""
        return 1.0 / (1.0 - self.gamma)

    def u(self, x):
        x = _as_positive(x)
        return _ret(x**self.gamma / self.gamma)

    def du(self, x):
        x = _as_positive(x)
        return _ret(x ** (self.gamma - 1.0))

    def d2u(self, x):
        x = _as_positive(x)
        return _ret((self.gamma - 1.0) * x ** (self.gamma - 2.0))

    def inverse_marginal(self, y):
        y = _as_positive(y, "y")
        return _ret(y ** (1.0 / (self.gamma - 1.0)))

    def risk_tolerance(self, x):
        x = _as_positive(x)
        return _ret(x / (1.0 - self.gamma))

    def risk_tolerance_prime(self, x):
        x = _as_positive(x)
        return _ret(np.full_like(x, self.a))

    def terminal_heat(self, xi):
        xi = np.asarray(xi, float)
        a = self.a
        return a * xi, np.full_like(xi, a), np.full_like(xi, a * a)

    def utility_of_heat(self, zeta):
        return np.exp(self.gamma * self.a * np.asarray(zeta, float)) / self.gamma

    def heat_closed_form(self, xi, tau):
        xi, tau = np.broadcast_arrays(np.asarray(xi, float), np.asarray(tau, float))
        a = self.a
        return a * xi + 0.5 * a * a * tau, np.full(xi.shape, a), np.full(xi.shape, a * a)


@dataclass(frozen=True)
class MixturePowers(_AtomicPower):
    """Mixture ``sum_i c_i x**gamma_i / gamma_i`` of power utilities."""

    weights: Sequence[float]
    exponents: Sequence[float]

    def __post_init__(self):
        c = _tuple(self.weights, "utility.weights")
        g = _tuple(self.exponents, "utility.exponents")
        if len(c) != len(g):
            raise ValidationError("weights and exponents must have equal length", "utility.weights")
        if any(ci <= 0 for ci in c):
            raise ValidationError("mixture weights must be strictly positive", "utility.weights")
        if any(not (0 < gi < 1) for gi in g):
            raise ValidationError("mixture exponents must lie strictly inside (0, 1)", "utility.exponents")
        object.__setattr__(self, "weights", c)
        object.__setattr__(self, "exponents", g)

    @property
    def atoms(self):
        g = np.array(self.exponents)
        return g, np.array(self.weights) / g


@dataclass(frozen=True)
class PowerMeasure(_AtomicPower):
    """``U(x) = sum_j w_j x**y_j`` for a discrete measure with atoms in ``(0, 1)``."""

    atom_exponents: Sequence[float]
    atom_weights: Sequence[float]

    def __post_init__(self):
        y = _tuple(self.atom_exponents, "utility.atoms")
        w = _tuple(self.atom_weights, "utility.weights")
        if len(y) != len(w):
            raise ValidationError("atoms and weights must have equal length", "utility.atoms")
        if any(wi <= 0 for wi in w):
            raise ValidationError("atom weights must be strictly positive", "utility.weights")
        if any(yi == 0 for yi in y):
            raise ValidationError("the measure may not charge the point 0", "utility.atoms")
        if any(not (0 < yi < 1) for yi in y):
            raise ValidationError("atoms must lie in (0, 1)", "utility.atoms")
        object.__setattr__(self, "atom_exponents", y)
        object.__setattr__(self, "atom_weights", w)

    @property
    def atoms(self):
        return np.array(self.atom_exponents), np.array(self.atom_weights)


# ---------------------------------------------------------------------------
# inverse-marginal measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InverseMarginalMeasure(UtilitySpec):
    """Utility defined by ``I(y) = sum_j w_j y**(-s_j)`` with ``0 < s_j <= N``.

    ``U`` is the antiderivative of ``U' = I^{-1}``. When every ``s_j > 1`` the
    normalization ``U(0+) = 0`` is exact. Otherwise ``U(0+)`` is not finite and
    ``U`` is normalized by ``U(x_min) = 0``; pass ``x_min=None`` to use the bare
    antiderivative ``-sum_j w_j s_j F_j(U'(x))`` instead (``F_j(y) = y**(1-s_j)/(1-s_j)``
    or ``log y``), which differs by an additive constant and avoids the loss of
    precision that a huge offset causes when some ``s_j`` is well below 1.
    """

    atom_exponents: Sequence[float]
    atom_weights: Sequence[float]
    N: float | None = None
    x_min: float | None = IMM_X_MIN
    _eta_min: float = field(init=False, repr=False, compare=False, default=np.inf)

    def __post_init__(self):
        s = _tuple(self.atom_exponents, "utility.atoms")
        w = _tuple(self.atom_weights, "utility.weights")
        if len(s) != len(w):
            raise ValidationError("atoms and weights must have equal length", "utility.atoms")
        if any(wi <= 0 for wi in w):
            raise ValidationError("atom weights must be strictly positive", "utility.weights")
        if any(si <= 0 for si in s):
            raise ValidationError(
                "inverse-marginal atoms must be strictly positive (an atom at 0 makes U' infinite "
                "on a neighbourhood of 0)",
                "utility.atoms",
            )
        n = max(s) if self.N is None else float(self.N)
        if not np.isfinite(n) or max(s) > n:
            raise ValidationError("support bound N must be finite and dominate all atoms", "utility.N")
        object.__setattr__(self, "atom_exponents", s)
        object.__setattr__(self, "atom_weights", w)
        object.__setattr__(self, "N", n)
        if self.x_min is not None and min(s) <= 1.0:
            object.__setattr__(self, "_eta_min", float(self._log_marginal(np.log(self.x_min))))

    @property
    def atoms(self):
        return np.array(self.atom_exponents), np.array(self.atom_weights)

    @property
    def zero_normalized(self) -> bool:
        """True when ``U(0+) = 0`` holds exactly (all atoms above 1)."""
        return min(self.atom_exponents) > 1.0

    # log I at eta = log y, with weights p for the moments of s
    def _log_inverse(self, eta):
        s, w = self.atoms
        terms = np.log(w) - s * np.asarray(eta, float)[..., None]
        lse, (m1, m2) = weighted_logsumexp(terms, values=[s, s * s])
        return lse, m1, m2

    def _log_marginal(self, logx):
        s, w = self.atoms
        logx = np.asarray(logx, float)
        k = int(np.argmax(w))
        eta0 = (np.log(w[k]) - logx) / s[k]

        def f(eta):
            lse, m1, _ = self._log_inverse(eta)
            return -lse, m1

        return solve_increasing(f, -logx, eta0, tol=1e-14)

    def _u_of_eta(self, eta):
        s, w = self.atoms
        eta = np.asarray(eta, float)[..., None]
        if not np.isfinite(self._eta_min):
            one_minus_s = 1.0 - s
            near_log = np.abs(one_minus_s) < 1e-12
            safe = np.where(near_log, 1.0, one_minus_s)
            g = np.where(near_log, -eta, -np.exp(safe * eta) / safe)
            return np.sum(w * s * g, axis=-1)
        em = self._eta_min
        d = eta - em
        one_minus_s = 1.0 - s
        near_log = np.abs(one_minus_s) < 1e-12
        safe = np.where(near_log, 1.0, one_minus_s)
        g = np.where(near_log, -d, -np.expm1(safe * d) / safe)
        return np.sum(w * s * np.exp(one_minus_s * em) * g, axis=-1)

    def u(self, x):
        x = _as_positive(x)
        return _ret(self._u_of_eta(self._log_marginal(np.log(x))))

    def du(self, x):
        x = _as_positive(x)
        return _ret(np.exp(self._log_marginal(np.log(x))))

    def d2u(self, x):
        x = _as_positive(x)
        eta = self._log_marginal(np.log(x))
        _, m1, _ = self._log_inverse(eta)
        # U'' = 1/I'(y) with I'(y) = -sum w s y^{-s-1} = -x m1 / y
        return _ret(-np.exp(eta) / (x * m1))

    def inverse_marginal(self, y):
        y = _as_positive(y, "y")
        s, w = self.atoms
        return _ret(np.sum(w * y[..., None] ** (-s), axis=-1))

    def risk_tolerance(self, x):
        x = _as_positive(x)
        eta = self._log_marginal(np.log(x))
        _, m1, _ = self._log_inverse(eta)
        return _ret(x * m1)

    def risk_tolerance_prime(self, x):
        x = _as_positive(x)
        eta = self._log_marginal(np.log(x))
        _, m1, m2 = self._log_inverse(eta)
        return _ret(m2 / m1)

    def terminal_heat(self, xi):
        lse, m1, m2 = self._log_inverse(-np.asarray(xi, float))
        return lse, m1, m2

    def utility_of_heat(self, zeta):
        return self._u_of_eta(-np.asarray(zeta, float))

    def heat_closed_form(self, xi, tau):
        s, w = self.atoms
        xi, tau = np.broadcast_arrays(np.asarray(xi, float), np.asarray(tau, float))
        terms = np.log(w) + s * xi[..., None] + 0.5 * s * s * tau[..., None]
        lse, (m1, m2) = weighted_logsumexp(terms, values=[s, s * s])
        return lse, m1, m2

    @property
    def slope_bounds(self):
        s, _ = self.atoms
        return float(s.min()), float(s.max())


# ---------------------------------------------------------------------------
# functional API
# ---------------------------------------------------------------------------


def u_eval(spec: UtilitySpec, x):
    """Evaluate ``U(x)``; raises :class:`DomainError` for ``x <= 0``."""
    return spec.u(x)


def inverse_marginal(spec: UtilitySpec, y):
    """Evaluate ``I(y)``; raises :class:`DomainError` for ``y <= 0``."""
    return spec.inverse_marginal(y)


def risk_tolerance_terminal(spec: UtilitySpec, x):
    """Evaluate ``R(x) = -U'(x)/U''(x)``."""
    return spec.risk_tolerance(x)


@dataclass(frozen=True)
class RiskProfile:
    """Risk tolerance / aversion evaluators with empirical derivative bounds.

    ``K_bounds[i-1]`` is the sup over the test grid of ``|d^i/dx^i R(x)^i|``.
    """

    R: Callable
    AP: Callable
    K_bounds: np.ndarray


@dataclass(frozen=True)
class Assumption1Report:
    grid: np.ndarray
    derivatives: np.ndarray  # shape (5, n): d^i R^i on grid
    stencil_errors: np.ndarray
    K0: float
    k_max: float | None
    flagged: tuple[int, ...]  # orders i whose bound exceeds k_max
    r_le_k0x: bool
    r_increasing: bool
    r_zero_limit: float  # R(x_min)/x_min * x_min, i.e. R at the smallest grid point
    ap_positive: bool
    u_increasing: bool
    u_concave: bool
    ae_estimate: float
    growth_alpha: float
    growth_kappa: float
    growth_holds: bool

    @property
    def passed(self) -> bool:
        return (
            not self.flagged
            and self.r_le_k0x
            and self.r_increasing
            and self.ap_positive
            and self.u_increasing
            and self.u_concave
            and self.ae_estimate < 1.0
            and self.growth_holds
            and bool(np.all(np.isfinite(self.derivatives)))
        )


def assumption1_check(
    spec: UtilitySpec,
    grid,
    *,
    k_max: float | None = None,
    rtol: float = 1e-3,
) -> tuple[RiskProfile, Assumption1Report]:
    """Numerically verify the regularity conditions on the risk tolerance.

    Finite-difference estimates of ``d^i/dx^i R(x)^i`` for ``i = 1..5`` are
    taken on ``grid`` with central stencils and one Richardson step. The
    relative step grows with the derivative order (see
    :func:`slowvol._numerics.central_derivative`).

    Parameters
    ----------
    spec : UtilitySpec
    grid : array_like
        Strictly increasing positive grid, at least 100 points spanning at
        least four decades.
    k_max : float, optional
        Flag orders whose empirical bound exceeds this value.
    rtol : float
        Stencil error tolerance relative to ``max(1, |D|)``.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 100:
        raise DomainError("grid must be 1-d with at least 100 points")
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise DomainError("grid must be positive and strictly increasing")
    if np.log10(grid[-1] / grid[0]) < 4.0 - 1e-12:
        raise DomainError("grid must span at least four decades")

    R = spec.risk_tolerance
    derivs = np.empty((5, grid.size))
    errs = np.empty((5, grid.size))
    for i in range(1, 6):

        def f(x, i=i):
            return np.asarray(R(x)) ** i

        d, e = central_derivative(f, grid, order=i, rtol=rtol, return_error=True)
        derivs[i - 1] = d
        errs[i - 1] = e
    k_bounds = np.max(np.abs(derivs), axis=1)
    flagged = tuple(i + 1 for i in range(5) if k_max is not None and k_bounds[i] > k_max)

    r = np.asarray(R(grid))
    k0 = float(k_bounds[0])
    r_le = bool(np.all(r <= k0 * grid * (1 + 1e-9)))
    r_inc = bool(np.all(np.diff(r) > 0))
    ap = np.asarray(spec.arrow_pratt(grid))

    # finite-difference checks of monotonicity / concavity of U
    du_fd = central_derivative(spec.u, grid, order=1)
    d2u_fd = central_derivative(spec.u, grid, order=2)

    # asymptotic elasticity x U'(x)/U(x) at the top of the grid
    top = grid[-5:]
    uu = np.asarray(spec.u(top))
    ae = float(np.max(top * np.asarray(spec.du(top)) / uu)) if np.all(uu > 0) else np.inf

    # growth I(y) <= alpha + kappa y^{-alpha} on y = U'(grid)
    ygrid = np.asarray(spec.du(grid))
    alpha = float(np.max(r / grid))
    iy = np.asarray(spec.inverse_marginal(ygrid))
    kappa = float(max(np.max((iy - alpha) * ygrid**alpha), 0.0))
    growth = bool(np.all(iy <= (alpha + kappa * ygrid ** (-alpha)) * (1 + 1e-10)))

    profile = RiskProfile(R=spec.risk_tolerance, AP=spec.arrow_pratt, K_bounds=k_bounds)
    report = Assumption1Report(
        grid=grid,
        derivatives=derivs,
        stencil_errors=errs,
        K0=k0,
        k_max=k_max,
        flagged=flagged,
        r_le_k0x=r_le,
        r_increasing=r_inc,
        r_zero_limit=float(r[0]),
        ap_positive=bool(np.all(ap > 0)),
        u_increasing=bool(np.all(du_fd > 0)),
        u_concave=bool(np.all(d2u_fd < 0)),
        ae_estimate=ae,
        growth_alpha=alpha,
        growth_kappa=kappa,
        growth_holds=growth,
    )
    return profile, report


def utility_from_params(kind: str, params: dict) -> UtilitySpec:
    """Build a utility from a class name and parameter arrays.

    ``kind`` is one of ``power``, ``mixture``, ``power_measure``,
    ``inverse_marginal`` (case-insensitive; class names are accepted too).
    """
    key = kind.strip().lower().replace("-", "_")
    try:
        if key in ("power",):
            return Power(float(params["gamma"]))
        if key in ("mixture", "mixturepowers", "mixture_powers"):
            return MixturePowers(params["weights"], params["exponents"])
        if key in ("power_measure", "powermeasure"):
            return PowerMeasure(params["atoms"], params["weights"])
        if key in ("inverse_marginal", "inversemarginalmeasure", "inverse_marginal_measure", "imm"):
            n = params.get("N")
            return InverseMarginalMeasure(params["atoms"], params["weights"], None if n is None else float(n))
    except KeyError as exc:
        raise ValidationError(f"missing parameter {exc.args[0]!r}", f"utility.{exc.args[0]}") from None
    raise ValidationError(f"unknown utility class {kind!r}", "utility.class")
