"""Small numerical kernels shared across modules.

Monotone root finding in log coordinates, finite-difference stencils with
Richardson extrapolation, and Gauss-Hermite expectation helpers.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .errors import ConvergenceError, NumericalDifferentiationError

__all__ = [
    "solve_increasing",
    "fd_weights",
    "central_derivative",
    "gauss_hermite",
    "weighted_logsumexp",
]

MAX_ITER = 200


def solve_increasing(
    fun: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    target,
    x0,
    *,
    tol: float = 1e-13,
    max_iter: int = MAX_ITER,
    step0: float = 1.0,
) -> np.ndarray:
    """Solve ``f(x) = target`` elementwise for a smooth strictly increasing ``f``.

    A bracket is grown from ``x0`` by monotone doubling, then refined by
    Newton steps that fall back to bisection whenever they leave the bracket.

    Parameters
    ----------
    fun : callable
        Maps an array ``x`` to ``(f(x), f'(x))`` of the same shape. It is always
        called on the full array so that closures over per-element parameters
        remain aligned.
    target, x0 : array_like
        Right-hand side and starting guess (broadcast together).
    tol : float
        Absolute tolerance on ``f(x) - target``.

    Returns
    -------
    numpy.ndarray
    """
    target, x = np.broadcast_arrays(np.asarray(target, float), np.asarray(x0, float))
    target = target.copy()
    x = x.copy()
    lo = np.full(x.shape, -np.inf)
    hi = np.full(x.shape, np.inf)

    f, df = fun(x)
    g = f - target
    step = np.full(x.shape, float(step0))
    # grow the bracket
    for _ in range(max_iter):
        lo = np.where(g <= 0, np.maximum(lo, x), lo)
        hi = np.where(g >= 0, np.minimum(hi, x), hi)
        need_lo = ~np.isfinite(lo)
        need_hi = ~np.isfinite(hi)
        if not (need_lo.any() or need_hi.any()):
            break
        newton = np.where(df > 0, g / np.where(df > 0, df, 1.0), step)
        jump = np.clip(np.abs(newton) * 1.5, step, None)
        x = np.where(need_lo, x - jump, np.where(need_hi, x + jump, x))
        step = np.where(need_lo | need_hi, step * 2.0, step)
        f, df = fun(x)
        g = f - target
    else:
        raise ConvergenceError("could not bracket root within the iteration cap")

    # polish: Newton inside the bracket, bisection fallback; iterate to
    # machine precision (stall detection) once the tolerance is met
    x = np.where(np.abs(g) <= tol, x, 0.5 * (lo + hi))
    eps = np.finfo(float).eps
    met = np.zeros(x.shape, dtype=bool)
    for _ in range(max_iter):
        f, df = fun(x)
        g = f - target
        lo = np.where(g < 0, x, lo)
        hi = np.where(g > 0, x, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = x - g / df
        bad = ~np.isfinite(xn) | (xn < lo) | (xn > hi)
        xn = np.where(bad, 0.5 * (lo + hi), xn)
        xn = np.where(g == 0, x, xn)
        stalled = np.abs(xn - x) <= 2 * eps * np.maximum(1.0, np.abs(x))
        narrow = hi - lo <= 4 * eps * np.maximum(1.0, np.abs(x))
        conv = np.abs(g) <= tol
        finished = (conv & (met | stalled)) | narrow | (g == 0)
        if finished.all():
            return x
        met |= conv
        x = np.where(finished, x, xn)
    raise ConvergenceError(f"root finder exceeded {max_iter} iterations")


@lru_cache(maxsize=None)
def fd_weights(order: int, half_width: int) -> np.ndarray:
    """Central finite-difference weights on offsets ``-p..p`` (unit spacing)."""
    offsets = np.arange(-half_width, half_width + 1, dtype=float)
    n = offsets.size
    vander = np.vander(offsets, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[order] = float(np.prod(np.arange(1, order + 1)))
    w = np.linalg.solve(vander, rhs)
    w.setflags(write=False)
    return w


def _stencil(f, x, order, h):
    p = (order + 1) // 2
    w = fd_weights(order, p)
    offs = np.arange(-p, p + 1)
    acc = 0.0
    for wk, k in zip(w, offs):
        if wk != 0.0:
            acc = acc + wk * np.asarray(f(x + k * h), float)
    return acc / h**order


def central_derivative(
    f: Callable,
    x,
    order: int = 1,
    h=None,
    *,
    rel_step: float | None = None,
    rtol: float | None = None,
    return_error: bool = False,
):
    """Derivative of ``f`` at ``x`` by central stencils plus one Richardson step.

    The minimal central stencil has second-order truncation error, so one
    extrapolation ``(4 D(h/2) - D(h)) / 3`` removes the leading term.

    Parameters
    ----------
    f : callable
        Vectorized function.
    x : array_like
        Evaluation points.
    order : int
        Derivative order (1..6).
    h : float or array_like, optional
        Absolute step. Defaults to ``rel_step * max(|x|, 1e-300)``.
    rel_step : float, optional
        Relative step; the default scales like ``eps**(1/(order+4))`` which
        balances roundoff against the extrapolated truncation error.
    rtol : float, optional
        If given, raise :class:`NumericalDifferentiationError` when the
        extrapolation error estimate exceeds ``rtol * max(1, |D|)``.
    return_error : bool
        Also return the error estimate ``|D(h/2) - D(h)| / 3``.
    """
    x = np.asarray(x, float)
    if h is None:
        if rel_step is None:
            rel_step = 1e-4 if order == 1 else np.finfo(float).eps ** (1.0 / (order + 4))
        h = rel_step * np.maximum(np.abs(x), 1e-300)
    h = np.asarray(h, float)
    d1 = _stencil(f, x, order, h)
    d2 = _stencil(f, x, order, h / 2)
    d = (4.0 * d2 - d1) / 3.0
    err = np.abs(d2 - d1) / 3.0
    if rtol is not None:
        scale = np.maximum(1.0, np.abs(d))
        if np.any(~np.isfinite(d)) or np.any(err > rtol * scale):
            raise NumericalDifferentiationError(
                f"stencil error estimate {float(np.max(err / scale)):.3g} exceeds tolerance {rtol:g} "
                f"for derivative order {order}; refine the grid or the step"
            )
    return (d, err) if return_error else d


@lru_cache(maxsize=None)
def gauss_hermite(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Probabilists' Gauss-Hermite nodes and log-weights normalized to N(0,1)."""
    if n < 2:
        raise ValueError("n_gh must be at least 2")
    u, w = np.polynomial.hermite_e.hermegauss(n)
    logw = np.log(w) - 0.5 * np.log(2 * np.pi)
    u.setflags(write=False)
    logw.setflags(write=False)
    return u, logw


def weighted_logsumexp(logterms: np.ndarray, axis: int = -1, values=None):
    """Return ``log sum exp(logterms)`` and optionally softmax-weighted averages.

    ``values`` is a sequence of arrays broadcastable to ``logterms``; for each,
    ``sum(p * value)`` with ``p = softmax(logterms)`` is returned as well.
    """
    lse = logsumexp(logterms, axis=axis)
    if values is None:
        return lse
    p = np.exp(logterms - np.expand_dims(lse, axis))
    return lse, [np.sum(p * v, axis=axis) for v in values]
