"""Riccati machinery for exponential-affine moments under a CIR factor.

With ``dZ = delta (m - Z) dt + sqrt(delta) beta sqrt(Z) dW`` the moments

* ``E[exp(w Z_s) | Z_t = z] = exp(w z + A(s - t) z + B(s - t))``  (``GMoment``)
* ``E[(X_s)**p | X_t = x, Z_t = z] = x**p exp(A(s - t) z + B(s - t))`` for the
  proportional strategy ``kappa * mu x z / (1 - gamma)`` (``WealthMoment``)

are exponential-affine in ``z`` with ``A`` solving a scalar Riccati equation
``A' = qa A**2 + qb A + qc`` and ``B' = delta m (w + A)`` (resp. ``delta m A``).

Two closed forms are provided: the specialised formula for ``GMoment`` and a
general constant-coefficient solution (hyperbolic/trigonometric form chosen by
the sign of the discriminant). A classic RK4 integrator with step-doubling
error control serves as an independent numerical check and detects explosion.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .errors import ExplosionError, ValidationError

__all__ = [
    "RiccatiSpec",
    "RiccatiSolution",
    "affine_riccati",
    "a_closed_form",
    "b_closed_form",
    "tau_star",
    "riccati_integrate",
    "moment_function",
    "uniform_bound_scan",
    "curve_table",
]

BLOWUP_CAP = 1e12


@dataclass(frozen=True)
class RiccatiSpec:
    """Parameters of a Riccati moment problem.

    Parameters
    ----------
    delta, beta, m : float
        CIR time scale, vol-of-vol and mean level.
    w : float
        Terminal exponent weight (``GMoment`` only).
    variant : {"g_moment", "wealth_moment"}
    mu, gamma, rho : float
        Market parameters for the wealth variant.
    p : float
        Moment order for the wealth variant (2 gives the second moment).
    kappa : float
        Strategy multiple of the zeroth-order strategy.
    """

    delta: float
    beta: float
    m: float
    w: float = 0.0
    variant: str = "g_moment"
    mu: float = 0.0
    gamma: float = 0.5
    rho: float = 0.0
    p: float = 2.0
    kappa: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.delta <= 1.0):
            raise ValidationError("delta must lie in [0, 1]", "riccati.delta")
        if not self.beta > 0:
            raise ValidationError("beta must be positive", "riccati.beta")
        if not self.m > 0:
            raise ValidationError("m must be positive", "riccati.m")
        if self.variant not in ("g_moment", "wealth_moment"):
            raise ValidationError(f"unknown variant {self.variant!r}", "riccati.variant")
        if self.variant == "wealth_moment":
            if not (0.0 < self.gamma < 1.0):
                raise ValidationError("gamma must lie in (0, 1)", "riccati.gamma")
            if not (-1.0 < self.rho < 1.0):
                raise ValidationError("rho must lie in (-1, 1)", "riccati.rho")

    @classmethod
    def g_moment(cls, delta, beta, m, w) -> "RiccatiSpec":
        return cls(delta=delta, beta=beta, m=m, w=w, variant="g_moment")

    @classmethod
    def wealth_second_moment(cls, delta, beta, m, mu, gamma, rho) -> "RiccatiSpec":
        return cls(delta=delta, beta=beta, m=m, variant="wealth_moment", mu=mu, gamma=gamma, rho=rho)

    @classmethod
    def wealth_moment(cls, delta, beta, m, mu, gamma, rho, p, kappa=1.0) -> "RiccatiSpec":
        return cls(
            delta=delta, beta=beta, m=m, variant="wealth_moment", mu=mu, gamma=gamma, rho=rho, p=p, kappa=kappa
        )

    @property
    def coefficients(self) -> tuple[float, float, float]:
        """``(qa, qb, qc)`` of ``A' = qa A**2 + qb A + qc``."""
        d, b = self.delta, self.beta
        if self.variant == "g_moment":
            w = self.w
            return 0.5 * d * b * b, d * b * b * w - d, 0.5 * d * b * b * w * w - d * w
        g1 = 1.0 - self.gamma
        p, k, mu = self.p, self.kappa, self.mu
        qb = p * k * self.rho * math.sqrt(d) * mu * b / g1 - d
        qc = p * k * mu * mu / g1 + 0.5 * p * (p - 1.0) * k * k * mu * mu / g1**2
        return 0.5 * d * b * b, qb, qc

    def rhs(self, tau, y):
        """Right-hand side for the state ``(A, B)``."""
        qa, qb, qc = self.coefficients
        a = y[0]
        shift = self.w if self.variant == "g_moment" else 0.0
        return np.array([qa * a * a + qb * a + qc, self.delta * self.m * (shift + a)])


@dataclass(frozen=True)
class RiccatiSolution:
    """``A`` and ``B`` evaluators with their explosion time."""

    A: Callable
    B: Callable
    tau_star: float
    source: str
    tau: np.ndarray | None = None
    A_values: np.ndarray | None = None
    B_values: np.ndarray | None = None
    tau_star_bracket: tuple[float, float] | None = None
    truncated: bool = False


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


def affine_riccati(qa: float, qb: float, qc: float, tau):
    """Solve ``A' = qa A**2 + qb A + qc``, ``A(0) = 0`` in closed form.

    Returns ``(A(tau), int_0^tau A, tau_star)``. Values at or beyond
    ``tau_star`` are ``nan``.

    With ``A = -u'/(qa u)`` the equation linearizes to
    ``u'' - qb u' + qa qc u = 0``, ``u(0) = 1``, ``u'(0) = 0``, whose solution is
    ``u = exp(b tau) (cosh(g tau) - b sinh(g tau)/g)`` with ``b = qb/2`` and
    ``g = sqrt(qb**2 - 4 qa qc)/2`` (trigonometric when the discriminant is
    negative).
    """
    tau = np.asarray(tau, float)
    b = 0.5 * qb
    disc = qb * qb - 4.0 * qa * qc
    if qa == 0.0:
        if qb == 0.0:
            return qc * tau, 0.5 * qc * tau**2, math.inf
        a = qc * np.expm1(qb * tau) / qb
        ia = qc * (np.expm1(qb * tau) - qb * tau) / qb**2
        return a, ia, math.inf

    scale = max(abs(qb), math.sqrt(abs(qa * qc)), 1e-300)
    if abs(disc) <= 1e-14 * scale * scale:
        denom = 1.0 - b * tau
        ts = 1.0 / b if b > 0 else math.inf
        with np.errstate(divide="ignore", invalid="ignore"):
            a = qc * tau / denom
            ia = -(b * tau + np.log(denom)) / qa
    elif disc > 0:
        g = 0.5 * math.sqrt(disc)
        ts = math.atanh(g / b) / g if b > g else math.inf
        th = np.tanh(g * tau) / g
        denom = 1.0 - b * th
        with np.errstate(divide="ignore", invalid="ignore"):
            a = qc * th / denom
            log_cosh = g * tau + np.log1p(np.exp(-2.0 * g * tau)) - math.log(2.0)
            ia = -(b * tau + log_cosh + np.log(denom)) / qa
    else:
        h = 0.5 * math.sqrt(-disc)
        ts = math.atan2(h, b) / h
        with np.errstate(divide="ignore", invalid="ignore"):
            denom = np.cos(h * tau) - b * np.sin(h * tau) / h
            a = qc * (np.sin(h * tau) / h) / denom
            ia = -(b * tau + np.log(denom)) / qa
    bad = tau >= ts
    a = np.where(bad, np.nan, a)
    ia = np.where(bad, np.nan, ia)
    return a, ia, ts


def tau_star(spec: RiccatiSpec) -> float:
    """Explosion time of ``A`` (``inf`` when ``A`` stays finite)."""
    if spec.delta == 0.0:
        return math.inf
    if spec.variant == "g_moment":
        c = 2.0 / spec.beta**2
        w = spec.w
        if w > c:
            return -math.log((w - c) / w) / spec.delta
        return math.inf
    return affine_riccati(*spec.coefficients, 0.0)[2]


def _check_tau(spec, tau):
    tau = np.asarray(tau, float)
    if np.any(tau < 0):
        raise ValidationError("tau must be nonnegative", "tau")
    ts = tau_star(spec)
    if np.any(tau >= ts):
        raise ExplosionError(f"tau beyond explosion time tau_star = {ts:.12g}", ts)
    return tau


def a_closed_form(spec: RiccatiSpec, tau):
    """Closed-form ``A`` for the ``GMoment`` system.

    Written as ``A = w E (w - c) / (c - w E)`` with ``c = 2/beta**2`` and
    ``E = 1 - exp(-delta tau)``; this is algebraically the standard formula
    ``-w E / (1 - w/(w - c) exp(-delta tau))`` but stays finite (and exactly
    zero) in the degenerate case ``w = c``.
    """
    if spec.variant != "g_moment":
        raise ValidationError("closed form A is only available for the g_moment variant", "riccati.variant")
    tau = _check_tau(spec, tau)
    c = 2.0 / spec.beta**2
    w = spec.w
    e = -np.expm1(-spec.delta * tau)
    out = w * e * (w - c) / (c - w * e)
    return float(out) if out.ndim == 0 else out


def b_closed_form(spec: RiccatiSpec, tau):
    """Closed-form ``B = -(2m/beta**2) log(1 - (w beta**2/2)(1 - exp(-delta tau)))``."""
    if spec.variant != "g_moment":
        raise ValidationError("closed form B is only available for the g_moment variant", "riccati.variant")
    tau = _check_tau(spec, tau)
    c = 2.0 / spec.beta**2
    e = -np.expm1(-spec.delta * tau)
    out = -spec.m * c * np.log1p(-spec.w * e / c)
    return float(out) if out.ndim == 0 else out


def closed_form_solution(spec: RiccatiSpec) -> RiccatiSolution:
    """Closed-form ``RiccatiSolution`` (specialised for ``GMoment``, general otherwise)."""
    ts = tau_star(spec)
    if spec.variant == "g_moment":
        return RiccatiSolution(A=lambda s: a_closed_form(spec, s), B=lambda s: b_closed_form(spec, s), tau_star=ts, source="closed_form")
    coeffs = spec.coefficients
    dm = spec.delta * spec.m

    def a_fn(s):
        _check_tau(spec, s)
        out = affine_riccati(*coeffs, s)[0]
        return float(out) if np.ndim(out) == 0 else out

    def b_fn(s):
        _check_tau(spec, s)
        out = dm * affine_riccati(*coeffs, s)[1]
        return float(out) if np.ndim(out) == 0 else out

    return RiccatiSolution(A=a_fn, B=b_fn, tau_star=ts, source="closed_form")


# ---------------------------------------------------------------------------
# numerical integration
# ---------------------------------------------------------------------------


def _rk4(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def riccati_integrate(
    spec: RiccatiSpec,
    tau_max: float,
    step: float | None = None,
    *,
    rtol: float = 1e-12,
    cap: float = BLOWUP_CAP,
    max_halvings: int = 60,
) -> RiccatiSolution:
    """Integrate ``(A, B)`` with classic RK4 and step-doubling error control.

    Each step is taken once with ``h`` and twice with ``h/2``; the difference
    estimates the local error and the Richardson combination is accepted when
    it is below ``rtol * max(1, |y|)``. Otherwise the step is halved. After an
    accepted step the step size doubles again up to ``step``, so away from an
    explosion the output grid is the regular ``step`` grid.

    Trial steps that overshoot ``cap`` are rejected like inaccurate ones, so the
    integrator walks up the vertical asymptote with shrinking steps. Explosion
    is declared once an accepted ``|A|`` exceeds ``cap`` or the step has been
    halved ``max_halvings`` times in a row; the solution is then truncated and
    ``tau_star_bracket`` holds the last reached time and that time plus one
    base step.
    """
    if not tau_max > 0:
        raise ValidationError("tau_max must be positive", "riccati.tau_max")
    if step is None:
        step = 1e-3 * min(1.0, 1.0 / spec.delta) if spec.delta > 0 else 1e-3
    if not step > 0:
        raise ValidationError("step must be positive", "riccati.step")
    f = spec.rhs
    taus = [0.0]
    ys = [np.zeros(2)]
    t = 0.0
    y = np.zeros(2)
    h = step
    halvings = 0
    exploded = False
    while t < tau_max * (1 - 1e-15):
        h = min(h, tau_max - t)
        full = _rk4(f, t, y, h)
        half = _rk4(f, t + 0.5 * h, _rk4(f, t, y, 0.5 * h), 0.5 * h)
        err = np.max(np.abs(half - full)) / 15.0
        finite = np.all(np.isfinite(half)) and np.all(np.isfinite(full)) and abs(half[0]) <= cap
        if not finite or err > rtol * max(1.0, float(np.max(np.abs(half)))):
            halvings += 1
            if halvings > max_halvings or t + 0.5 * h <= t * (1 + 4 * np.finfo(float).eps):
                exploded = True
                break
            h *= 0.5
            continue
        y = half + (half - full) / 15.0
        t = t + h
        taus.append(t)
        ys.append(y)
        halvings = 0
        h = min(2.0 * h, step)
        if abs(y[0]) > cap:
            exploded = True
            break
    tau = np.array(taus)
    vals = np.array(ys)
    dvals = np.array([f(s, v) for s, v in zip(tau, vals)])
    if exploded:
        warnings.warn(f"Riccati solution exploded near tau = {t:.12g}; truncated", RuntimeWarning, stacklevel=2)
        bracket = (t, t + step)
        ts_emp = t
    else:
        bracket = None
        ts_emp = math.inf

    if tau.size >= 2:
        sa = CubicHermiteSpline(tau, vals[:, 0], dvals[:, 0], extrapolate=False)
        sb = CubicHermiteSpline(tau, vals[:, 1], dvals[:, 1], extrapolate=False)
    else:  # pragma: no cover - degenerate
        sa = sb = lambda s: np.zeros_like(np.asarray(s, float))

    def a_fn(s):
        out = sa(np.asarray(s, float))
        return float(out) if np.ndim(out) == 0 else out

    def b_fn(s):
        out = sb(np.asarray(s, float))
        return float(out) if np.ndim(out) == 0 else out

    return RiccatiSolution(
        A=a_fn,
        B=b_fn,
        tau_star=ts_emp,
        source="numeric",
        tau=tau,
        A_values=vals[:, 0],
        B_values=vals[:, 1],
        tau_star_bracket=bracket,
        truncated=exploded,
    )


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------


def moment_function(spec: RiccatiSpec, t, z, s, x: float = 1.0, *, solution: RiccatiSolution | None = None):
    """Exponential-affine moment at time ``t`` for horizon ``s``.

    ``GMoment``: ``exp(w z + A(s-t) z + B(s-t))``.
    ``WealthMoment``: ``x**p exp(A(s-t) z + B(s-t))``.
    """
    tau = np.asarray(s, float) - np.asarray(t, float)
    if np.any(tau < 0):
        raise ValidationError("require s >= t", "s")
    sol = solution or closed_form_solution(spec)
    if np.any(tau >= sol.tau_star):
        raise ExplosionError(f"horizon beyond explosion time tau_star = {sol.tau_star:.12g}", sol.tau_star)
    a = np.asarray(sol.A(tau))
    b = np.asarray(sol.B(tau))
    z = np.asarray(z, float)
    if spec.variant == "g_moment":
        out = np.exp(spec.w * z + a * z + b)
    else:
        out = np.asarray(x, float) ** spec.p * np.exp(a * z + b)
    return float(out) if out.ndim == 0 else out


def uniform_bound_scan(make_spec: Callable[[float], RiccatiSpec], deltas, T: float) -> np.ndarray:
    """``sup_{[0, T]} |A^delta|`` for each ``delta`` (closed form on a fine grid)."""
    grid = np.linspace(0.0, T, 1001)
    out = []
    for d in deltas:
        sol = closed_form_solution(make_spec(float(d)))
        out.append(float(np.max(np.abs(np.asarray(sol.A(grid))))))
    return np.array(out)


def curve_table(spec: RiccatiSpec, tau_max: float, step: float | None = None) -> dict:
    """Columns ``tau, A_closed, A_numeric, B`` on the integrator grid plus an explosion report."""
    num = riccati_integrate(spec, tau_max, step)
    tau = num.tau
    ts = tau_star(spec)
    finite = tau < ts
    a_closed = np.full(tau.shape, np.nan)
    if spec.variant == "g_moment":
        a_closed[finite] = a_closed_form(spec, tau[finite])
    else:
        a_closed[finite] = affine_riccati(*spec.coefficients, tau[finite])[0]
    return {
        "tau": tau,
        "A_closed": a_closed,
        "A_numeric": num.A_values,
        "B": num.B_values,
        "tau_star": ts,
        "tau_star_bracket": num.tau_star_bracket,
        "truncated": num.truncated,
    }
