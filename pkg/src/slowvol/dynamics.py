"""Market model, strategy families and path simulation of ``(X, Z)``.

The wealth of an investor holding the amount ``pi`` in the risky asset and the
slow factor evolve as

    dX = pi(t, X, Z) mu(Z) dt + pi(t, X, Z) sigma(Z) dW
    dZ = delta c(Z) dt + sqrt(delta) g(Z) dW^Z,          d<W, W^Z> = rho dt

Random numbers come from a counter-based generator (Philox) keyed by
``(seed, batch index)`` with a batch size that does not depend on the number
of worker threads, so results are bit-identical for any thread count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, SimulationError, ValidationError

__all__ = [
    "CIRParams",
    "MarketModel",
    "StrategyFamily",
    "PathConfig",
    "SimulationResult",
    "FellerReport",
    "simulate_paths",
    "exact_merton_wealth_sample",
    "feller_check",
    "batch_generator",
]

Strategy = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CIRParams:
    """Named CIR instance: ``mu(z) = mu``, ``sigma(z) = 1/sqrt(z)``, ``c = m - z``, ``g = beta sqrt(z)``."""

    mu: float
    m: float
    beta: float


@dataclass(frozen=True)
class MarketModel:
    """Coefficient functions of the slow-factor market.

    ``delta = 0`` is accepted and freezes the factor at its initial level.
    Models with ``positive_factor`` evaluate coefficients at
    ``max(Z, z_floor)`` (full truncation).
    """

    mu_fn: Callable
    sigma_fn: Callable
    c_fn: Callable
    g_fn: Callable
    rho: float
    delta: float = 1.0
    cir: Optional[CIRParams] = None
    lambda_fn: Optional[Callable] = None
    lambda_prime_fn: Optional[Callable] = None
    g_prime_fn: Optional[Callable] = None
    positive_factor: bool = False
    z_floor: float = 1e-12

    def __post_init__(self):
        if not (-1.0 < self.rho < 1.0):
            raise ValidationError("correlation must satisfy |rho| < 1", "model.rho")
        if not (0.0 <= self.delta <= 1.0):
            raise ValidationError("delta must lie in [0, 1]", "model.delta")

    @classmethod
    def cir_model(cls, mu: float, m: float, beta: float, rho: float, delta: float = 1.0) -> "MarketModel":
        if not beta > 0 or not m > 0:
            raise ValidationError("CIR parameters require m > 0 and beta > 0", "model.beta")

        def mu_fn(z):
            return np.full(np.shape(z), float(mu)) if np.ndim(z) else float(mu)

        return cls(
            mu_fn=mu_fn,
            sigma_fn=lambda z: 1.0 / np.sqrt(z),
            c_fn=lambda z: m - z,
            g_fn=lambda z: beta * np.sqrt(z),
            rho=rho,
            delta=delta,
            cir=CIRParams(mu, m, beta),
            lambda_fn=lambda z: mu * np.sqrt(z),
            lambda_prime_fn=lambda z: mu / (2.0 * np.sqrt(z)),
            g_prime_fn=lambda z: beta / (2.0 * np.sqrt(z)),
            positive_factor=True,
        )

    def with_delta(self, delta: float) -> "MarketModel":
        return replace(self, delta=float(delta))

    def lam(self, z):
        """Sharpe ratio ``mu(z)/sigma(z)``."""
        if self.lambda_fn is not None:
            return self.lambda_fn(z)
        return self.mu_fn(z) / self.sigma_fn(z)

    def lam_prime(self, z):
        """``lambda'(z)``: analytic when supplied, else central difference (relative step 1e-5)."""
        if self.lambda_prime_fn is not None:
            return self.lambda_prime_fn(z)
        z = np.asarray(z, float)
        h = 1e-5 * np.maximum(np.abs(z), 1.0)
        out = (np.asarray(self.lam(z + h)) - np.asarray(self.lam(z - h))) / (2 * h)
        return float(out) if out.ndim == 0 else out

    def check_factor(self, z):
        if self.positive_factor and not z > 0:
            raise DomainError("factor level must be positive for this model")
        vals = [self.mu_fn(z), self.sigma_fn(z), self.c_fn(z), self.g_fn(z)]
        if not all(np.isfinite(v) for v in vals) or not self.sigma_fn(z) > 0:
            raise DomainError(f"model coefficients are not finite/valid at z = {z}")


@dataclass(frozen=True)
class StrategyFamily:
    """Perturbed strategies ``pi0_base + delta**alpha * pi1_perturb``.

    ``identical_to_pi0`` declares that ``pi0_base`` coincides with the
    zeroth-order strategy. The optional scales record families of the form
    ``pi0_base = pi0_scale * pi0`` and ``pi1_perturb = pi1_scale * pi0``; they
    enable closed forms downstream and are otherwise informational.
    """

    pi0_base: Strategy
    pi1_perturb: Strategy
    alpha: float
    identical_to_pi0: bool = False
    pi0_scale: Optional[float] = None
    pi1_scale: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValidationError("alpha must be positive", "study.alpha")

    @classmethod
    def scaled(cls, pi0: Strategy, base_scale: float, perturb_scale: float, alpha: float, label: str = "") -> "StrategyFamily":
        """Family ``base_scale * pi0 + delta**alpha * perturb_scale * pi0``."""

        def base(t, x, z):
            return base_scale * pi0(t, x, z)

        def pert(t, x, z):
            return perturb_scale * pi0(t, x, z)

        return cls(
            pi0_base=base,
            pi1_perturb=pert,
            alpha=alpha,
            identical_to_pi0=base_scale == 1.0,
            pi0_scale=base_scale,
            pi1_scale=perturb_scale,
            label=label,
        )

    def at(self, delta: float) -> Strategy:
        """Effective strategy for a given ``delta``."""
        eps = float(delta) ** self.alpha if delta > 0 else 0.0
        base, pert = self.pi0_base, self.pi1_perturb

        def strategy(t, x, z):
            out = base(t, x, z)
            if eps != 0.0:
                out = out + eps * pert(t, x, z)
            return out

        return strategy


@dataclass(frozen=True)
class PathConfig:
    """Monte Carlo discretization and RNG settings.

    ``n_steps`` defaults to ``steps_per_unit * (T - t)`` (rounded up); the
    time step is always ``(T - t) / n_steps``.
    """

    n_paths: int = 200_000
    n_steps: Optional[int] = None
    seed: int = 0
    scheme: str = "euler_full_truncation"
    antithetic: bool = False
    common_random_numbers: bool = True
    wealth_scheme: str = "log"
    steps_per_unit: int = 256
    batch_size: int = 16_384
    threads: int = 1
    dump_paths: Optional[str] = None
    dump_max_paths: int = 16

    def __post_init__(self):
        if int(self.n_paths) <= 0:
            raise ValidationError("n_paths must be positive", "mc.n_paths")
        if self.n_steps is not None and int(self.n_steps) <= 0:
            raise ValidationError("n_steps must be positive", "mc.n_steps")
        if self.scheme not in ("euler_full_truncation", "milstein"):
            raise ValidationError(f"unknown scheme {self.scheme!r}", "mc.scheme")
        if self.wealth_scheme not in ("log", "euler"):
            raise ValidationError(f"unknown wealth scheme {self.wealth_scheme!r}", "mc.wealth_scheme")
        if self.batch_size <= 0 or self.batch_size % 2:
            raise ValidationError("batch_size must be a positive even integer", "mc.batch_size")
        if not (0 <= int(self.seed) < 2**64):
            raise ValidationError("seed must be an unsigned 64-bit integer", "mc.seed")
        if self.threads <= 0:
            raise ValidationError("threads must be positive", "mc.threads")

    def steps_for(self, horizon: float) -> int:
        if self.n_steps is not None:
            return int(self.n_steps)
        return max(1, int(math.ceil(self.steps_per_unit * horizon - 1e-9)))


@dataclass
class SimulationResult:
    """Terminal states of a simulation plus diagnostics."""

    terminal_wealth: np.ndarray
    terminal_factor: np.ndarray
    control: Optional[np.ndarray]
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FellerReport:
    applicable: bool
    passed: bool
    margin: float  # 2m - beta**2

    def __bool__(self):
        return self.passed


def batch_generator(seed: int, batch: int) -> np.random.Generator:
    """Counter-based generator for one batch: Philox keyed by ``(seed, batch)``."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, batch], dtype=np.uint64)))


def _batch_sizes(n_paths: int, batch_size: int) -> list[int]:
    full, rest = divmod(int(n_paths), batch_size)
    sizes = [batch_size] * full
    if rest:
        sizes.append(rest + (rest % 2))
    return sizes


def _draws(rng, n, antithetic):
    if antithetic:
        half = rng.standard_normal((2, n // 2))
        return np.concatenate([half, -half], axis=1)
    return rng.standard_normal((2, n))


def simulate_paths(
    model: MarketModel,
    strategy: Strategy,
    start: tuple[float, float, float],
    T: float,
    cfg: PathConfig,
    *,
    value_gradient: Optional[Callable] = None,
    record_increments: bool = False,
) -> SimulationResult:
    """Simulate ``(X, Z)`` from ``start = (t, x, z)`` to ``T``.

    Parameters
    ----------
    model : MarketModel
    strategy : callable
        ``(t, x, z) -> amount`` in the risky asset, vectorized over paths.
    start : tuple
        Initial time, wealth and factor level.
    T : float
        Horizon.
    cfg : PathConfig
    value_gradient : callable, optional
        ``(t, x, z) -> (phi_x, phi_z)``. When given, the stochastic integral
        ``sum phi_x pi sigma dW + phi_z sqrt(delta) g dW^Z`` (a zero-mean
        martingale for smooth ``phi``) is accumulated per path and returned as
        ``control``.
    record_increments : bool
        Keep the Brownian increments (memory heavy; for diagnostics).

    Returns
    -------
    SimulationResult
    """
    t0, x0, z0 = (float(v) for v in start)
    if not x0 > 0:
        raise DomainError("initial wealth must be positive")
    if not T > t0:
        raise DomainError("horizon must exceed the start time")
    model.check_factor(z0)
    if model.cir is not None:
        rep = feller_check(model)
        if not rep.passed:
            raise ValidationError(f"Feller condition violated (margin {rep.margin:.3g})", "model.beta")

    n_steps = cfg.steps_for(T - t0)
    dt = (T - t0) / n_steps
    sizes = _batch_sizes(cfg.n_paths, cfg.batch_size)

    def run(bi):
        return _simulate_batch(model, strategy, t0, x0, z0, dt, n_steps, sizes[bi], cfg, bi, value_gradient, record_increments)

    if cfg.threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(bi) for bi in range(len(sizes))]

    n = int(cfg.n_paths)
    xT = np.concatenate([p["x"] for p in parts])[:n]
    zT = np.concatenate([p["z"] for p in parts])[:n]
    ctrl = None if value_gradient is None else np.concatenate([p["cv"] for p in parts])[:n]
    diag = {
        "n_steps": n_steps,
        "dt": dt,
        "absorbed_count": int(sum(p["absorbed"] for p in parts)),
        "min_z": float(min(p["min_z"] for p in parts)),
        "truncation_count": int(sum(p["trunc"] for p in parts)),
    }
    if record_increments:
        diag["dW"] = np.concatenate([p["dW"] for p in parts], axis=1)[:, :n]
        diag["dWz"] = np.concatenate([p["dWz"] for p in parts], axis=1)[:, :n]
    if cfg.dump_paths:
        _dump(cfg.dump_paths, parts[0]["dump"], t0, dt)
    return SimulationResult(xT, zT, ctrl, diag)


def _simulate_batch(model, strategy, t0, x0, z0, dt, n_steps, nb, cfg, bi, grad, record):
    rng = batch_generator(int(cfg.seed), bi)
    delta = model.delta
    sqd = math.sqrt(delta)
    rho = model.rho
    rbar = math.sqrt(1.0 - rho * rho)
    sdt = math.sqrt(dt)
    x = np.full(nb, x0)
    z = np.full(nb, z0)
    alive = np.ones(nb, dtype=bool)
    cv = np.zeros(nb) if grad is not None else None
    min_z = z0
    trunc = 0
    log_scheme = cfg.wealth_scheme == "log"
    milstein = cfg.scheme == "milstein"
    dumping = bool(cfg.dump_paths) and bi == 0
    dump = [] if dumping else None
    keep = min(cfg.dump_max_paths, nb)
    if dumping:
        dump.append((x[:keep].copy(), z[:keep].copy()))
    dws, dwzs = ([], []) if record else (None, None)
    frozen = delta == 0.0
    zc = np.maximum(z, model.z_floor) if model.positive_factor else z
    mu = np.asarray(model.mu_fn(zc), float)
    sig = np.asarray(model.sigma_fn(zc), float)

    for k in range(n_steps):
        t = t0 + k * dt
        xi = _draws(rng, nb, cfg.antithetic)
        dW = sdt * xi[0]
        dWz = sdt * (rho * xi[0] + rbar * xi[1])
        if record:
            dws.append(dW)
            dwzs.append(dWz)
        if not frozen:
            zc = np.maximum(z, model.z_floor) if model.positive_factor else z
            mu = np.asarray(model.mu_fn(zc), float)
            sig = np.asarray(model.sigma_fn(zc), float)
        pi = np.where(alive, np.asarray(strategy(t, x, zc), float), 0.0)
        if grad is not None:
            gx, gz = grad(t, x, zc)
            incr = gx * pi * sig * dW
            if not frozen:
                incr = incr + gz * sqd * np.asarray(model.g_fn(zc), float) * dWz
            cv += np.where(alive, incr, 0.0)
        if log_scheme:
            with np.errstate(divide="ignore", invalid="ignore"):
                p = np.where(alive, pi / x, 0.0)
            x = x * np.exp((p * mu - 0.5 * p * p * sig * sig) * dt + p * sig * dW)
            newly = alive & ~(x > 0)
        else:
            x = x + pi * mu * dt + pi * sig * dW
            newly = alive & (x <= 0)
        if newly.any():
            x = np.where(newly, 0.0, x)
            alive &= ~newly
        if not frozen:
            g = np.asarray(model.g_fn(zc), float)
            z_new = z + delta * np.asarray(model.c_fn(zc), float) * dt + sqd * g * dWz
            if milstein and model.g_prime_fn is not None:
                z_new = z_new + 0.5 * delta * g * np.asarray(model.g_prime_fn(zc), float) * (dWz * dWz - dt)
            if model.positive_factor:
                neg = z_new < 0
                trunc += int(neg.sum())
            z = z_new
            min_z = min(min_z, float(z.min()))
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            bad = int(np.flatnonzero(~(np.isfinite(x) & np.isfinite(z)))[0])
            raise SimulationError(
                f"non-finite state at step {k} (batch {bi}, path {bi * cfg.batch_size + bad})",
                bi * cfg.batch_size + bad,
            )
        if dumping:
            dump.append((x[:keep].copy(), (np.maximum(z, 0.0) if model.positive_factor else z)[:keep].copy()))

    if model.positive_factor:
        # stored state is the truncated level; raw negative excursions are counted above
        z = np.maximum(z, 0.0)
    out = {"x": x, "z": z, "cv": cv, "absorbed": int((~alive).sum()), "min_z": min_z, "trunc": trunc, "dump": dump}
    if record:
        out["dW"] = np.array(dws)
        out["dWz"] = np.array(dwzs)
    return out


def _dump(path, dump, t0, dt):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "step", "t", "X", "Z"])
        for step, (xs, zs) in enumerate(dump):
            for pid, (xv, zv) in enumerate(zip(xs, zs)):
                w.writerow([pid, step, f"{t0 + step * dt:.17g}", f"{xv:.17g}", f"{zv:.17g}"])


def exact_merton_wealth_sample(sol, start: tuple[float, float], s: float, gaussian_draws) -> np.ndarray:
    """Exact optimal wealth at time ``s`` for a frozen Sharpe ratio.

    ``gaussian_draws`` are standard normals representing ``(W_s - W_t)/sqrt(s - t)``.
    """
    t, x = start
    return sol.exact_wealth(x, t, s, gaussian_draws)


def feller_check(model: MarketModel) -> FellerReport:
    """Feller condition ``beta**2 <= 2 m`` for the named CIR instance."""
    if model.cir is None:
        return FellerReport(applicable=False, passed=True, margin=math.nan)
    margin = 2.0 * model.cir.m - model.cir.beta**2
    return FellerReport(applicable=True, passed=margin >= -1e-15 * max(1.0, 2.0 * model.cir.m), margin=margin)
