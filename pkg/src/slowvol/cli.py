"""Command-line front end.

Usage::

    slowvol {merton,expand,converge,optimality,riccati} --config FILE [--out DIR]
            [--seed N] [--threads N]

Configuration files hold one ``section.key = value`` pair per line; ``#``
starts a comment and lists are comma-separated. Each command writes
``<study>.csv`` (17 significant digits) and ``<study>.summary.json`` to the
output directory, where ``<study>`` defaults to the command name and can be
set with ``study.name``.

Exit codes: 0 pass, 2 validation error, 3 inconclusive or failed study,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import warnings
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .dynamics import MarketModel, PathConfig, StrategyFamily, feller_check
from .errors import (
    ConvergenceError,
    DomainError,
    ExplosionError,
    NumericalDifferentiationError,
    OverflowGuardError,
    RangeError,
    SimulationError,
    ValidationError,
)
from .expansion import SlowFactorFrozen, ZerothOrder, approximation_select, pi0_eval, v0_eval, v1_eval
from .merton import MertonSolution, SharpeContext, operator_residuals
from .montecarlo import convergence_study, optimality_compare
from .riccati import RiccatiSpec, curve_table
from .utility import utility_from_params

__all__ = ["StudyConfig", "parse_config", "main", "EXIT_OK", "EXIT_VALIDATION", "EXIT_INCONCLUSIVE", "EXIT_NUMERICAL"]

log = logging.getLogger("slowvol")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INCONCLUSIVE = 3
EXIT_NUMERICAL = 4

KNOWN_KEYS = {
    "study.name", "study.deltas", "study.delta", "study.comparator", "study.rate_lo", "study.rate_hi",
    "horizon.T",
    "utility.class", "utility.gamma", "utility.weights", "utility.exponents", "utility.atoms", "utility.N",
    "model.kind", "model.mu", "model.m", "model.beta", "model.rho", "model.delta",
    "start.t", "start.x", "start.z",
    "mc.n_paths", "mc.n_steps", "mc.steps_per_unit", "mc.seed", "mc.antithetic", "mc.crn", "mc.scheme",
    "mc.wealth_scheme", "mc.control_variate", "mc.threads", "mc.dump_paths",
    "merton.lambda", "merton.sigma", "merton.residual_tol", "merton.residual_points", "merton.n_gh",
    "grid.t", "grid.x", "grid.z", "grid.n_t", "grid.x_min", "grid.x_max", "grid.n_x",
    "family.base_scale", "family.perturb_scale", "family.alpha", "family.label",
    "riccati.variant", "riccati.delta", "riccati.beta", "riccati.m", "riccati.w", "riccati.mu",
    "riccati.gamma", "riccati.rho", "riccati.tau_max", "riccati.step", "riccati.tol",
}


class StudyConfig:
    """Flat dotted key/value configuration with typed accessors.

    Accessors raise :class:`ValidationError` carrying the offending key.
    """

    def __init__(self, values: dict[str, str], source: str = "<memory>"):
        unknown = sorted(set(values) - KNOWN_KEYS)
        if unknown:
            raise ValidationError(f"unknown configuration key(s): {', '.join(unknown)}", unknown[0])
        self.values = dict(values)
        self.source = source

    def has(self, key: str) -> bool:
        return key in self.values

    def str(self, key: str, default: Optional[str] = None) -> str:
        if key not in self.values:
            if default is None:
                raise ValidationError("required key is missing", key)
            return default
        return self.values[key]

    def float(self, key: str, default: Optional[float] = None) -> float:
        if key not in self.values:
            if default is None:
                raise ValidationError("required key is missing", key)
            return float(default)
        try:
            v = float(self.values[key])
        except ValueError:
            raise ValidationError(f"expected a number, got {self.values[key]!r}", key) from None
        if not math.isfinite(v):
            raise ValidationError("value must be finite", key)
        return v

    def int(self, key: str, default: Optional[int] = None) -> int:
        v = self.float(key, default)
        if v != int(v):
            raise ValidationError(f"expected an integer, got {self.values.get(key)!r}", key)
        return int(v)

    def bool(self, key: str, default: bool) -> bool:
        if key not in self.values:
            return default
        s = self.values[key].strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"expected a boolean, got {self.values[key]!r}", key)

    def floats(self, key: str, default: Optional[list] = None) -> list[float]:
        if key not in self.values:
            if default is None:
                raise ValidationError("required key is missing", key)
            return list(default)
        try:
            out = [float(p) for p in self.values[key].split(",") if p.strip()]
        except ValueError:
            raise ValidationError(f"expected a comma-separated list of numbers, got {self.values[key]!r}", key) from None
        if not out:
            raise ValidationError("list is empty", key)
        return out

    def as_dict(self) -> dict:
        return dict(sorted(self.values.items()))


def parse_config(text: str, source: str = "<memory>") -> StudyConfig:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value'", "config")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ValidationError(f"{source}:{lineno}: duplicate key", key)
        values[key] = val
    return StudyConfig(values, source)


def load_config(path: str | Path) -> StudyConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read configuration: {exc}", "--config") from None
    return parse_config(text, str(p))


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_utility(cfg: StudyConfig):
    kind = cfg.str("utility.class")
    params: dict[str, Any] = {}
    for key in ("gamma", "N"):
        if cfg.has(f"utility.{key}"):
            params[key] = cfg.float(f"utility.{key}")
    for key in ("weights", "exponents", "atoms"):
        if cfg.has(f"utility.{key}"):
            params[key] = cfg.floats(f"utility.{key}")
    try:
        return utility_from_params(kind, params)
    except ValidationError:
        raise
    except (ValueError, DomainError) as exc:
        raise ValidationError(str(exc), "utility") from None


def build_model(cfg: StudyConfig) -> MarketModel:
    kind = cfg.str("model.kind", "cir").lower()
    if kind != "cir":
        raise ValidationError(f"unsupported model kind {kind!r} (only 'cir' is configurable)", "model.kind")
    model = MarketModel.cir_model(
        cfg.float("model.mu"), cfg.float("model.m"), cfg.float("model.beta"), cfg.float("model.rho"), cfg.float("model.delta", 1.0)
    )
    rep = feller_check(model)
    if not rep.passed:
        raise ValidationError(f"Feller condition beta^2 <= 2m violated (margin {rep.margin:.6g})", "model.beta")
    return model


def build_path_config(cfg: StudyConfig, seed: Optional[int], threads: Optional[int]) -> PathConfig:
    return PathConfig(
        n_paths=cfg.int("mc.n_paths", 200_000),
        n_steps=cfg.int("mc.n_steps") if cfg.has("mc.n_steps") else None,
        seed=seed if seed is not None else cfg.int("mc.seed", 0),
        scheme=cfg.str("mc.scheme", "euler_full_truncation"),
        antithetic=cfg.bool("mc.antithetic", False),
        common_random_numbers=cfg.bool("mc.crn", True),
        wealth_scheme=cfg.str("mc.wealth_scheme", "log"),
        steps_per_unit=cfg.int("mc.steps_per_unit", 256),
        threads=threads if threads is not None else cfg.int("mc.threads", 1),
        dump_paths=cfg.str("mc.dump_paths", "") or None,
    )


def _start(cfg: StudyConfig):
    return (cfg.float("start.t", 0.0), cfg.float("start.x", 1.0), cfg.float("start.z", 1.0))


def _x_grid(cfg: StudyConfig):
    if cfg.has("grid.x"):
        return np.array(cfg.floats("grid.x"))
    return np.logspace(
        math.log10(cfg.float("grid.x_min", 0.1)), math.log10(cfg.float("grid.x_max", 10.0)), cfg.int("grid.n_x", 20)
    )


def _t_grid(cfg: StudyConfig, T: float):
    if cfg.has("grid.t"):
        return np.array(cfg.floats("grid.t"))
    return np.linspace(0.0, T, cfg.int("grid.n_t", 20))


# ---------------------------------------------------------------------------
# commands: each returns (status, rows, columns, summary)
# ---------------------------------------------------------------------------


def cmd_merton(cfg: StudyConfig, pcfg_args):
    utility = build_utility(cfg)
    T = cfg.float("horizon.T", 1.0)
    sol = MertonSolution(utility, SharpeContext(cfg.float("merton.lambda"), cfg.float("merton.sigma", 1.0), T), cfg.int("merton.n_gh", 128))
    ts, xs = _t_grid(cfg, T), _x_grid(cfg)
    if np.any(ts < 0) or np.any(ts > T) or np.any(xs <= 0):
        raise ValidationError("grid must satisfy 0 <= t <= T and x > 0", "grid")
    tt, xx = np.meshgrid(ts, xs, indexing="ij")
    tt, xx = tt.ravel(), xx.ravel()
    m, mx, mxx = sol.value_derivatives(xx, tt)
    r = np.asarray(sol.risk_tolerance(xx, tt))
    pi = np.asarray(sol.merton_strategy(xx, tt))
    cols = ["t", "x", "M", "M_x", "M_xx", "R", "pi_star"]
    rows = np.column_stack([tt, xx, m, mx, mxx, r, pi])

    n_res = cfg.int("merton.residual_points", 3)
    tol = cfg.float("merton.residual_tol", 1e-5)
    rt = np.linspace(0.0, T, n_res + 1)[:-1]
    rx = np.geomspace(max(xs.min(), 1e-3), xs.max(), n_res)
    rtt, rxx = np.meshgrid(rt, rx, indexing="ij")
    res = operator_residuals(sol, rtt.ravel(), rxx.ravel())
    summary = {"representation": sol.representation, "residuals": res.summary(), "residual_tol": tol}
    ok = max(res.max_pde, res.max_vega_gamma, res.max_r_lambda) < tol
    monotone = bool(np.all(np.diff(np.reshape(mx, (ts.size, xs.size)), axis=1) < 0))
    summary["M_x_decreasing_in_x"] = monotone
    return (EXIT_OK if ok else EXIT_INCONCLUSIVE), rows, cols, summary


def cmd_expand(cfg: StudyConfig, pcfg_args):
    utility = build_utility(cfg)
    model = build_model(cfg)
    T = cfg.float("horizon.T", 1.0)
    delta = cfg.float("study.delta", model.delta)
    ts = np.array(cfg.floats("grid.t", [0.0]))
    xs = _x_grid(cfg)
    zs = np.array(cfg.floats("grid.z", [1.0]))
    out = []
    for z in zs:
        fr = SlowFactorFrozen.from_model(model, z, T)
        for t in ts:
            v0 = np.atleast_1d(v0_eval(fr, utility, t, xs))
            v1 = np.atleast_1d(v1_eval(fr, utility, t, xs))
            p0 = np.atleast_1d(pi0_eval(fr, utility, t, xs))
            for i, x in enumerate(xs):
                out.append((t, x, z, v0[i], v1[i], p0[i], v0[i] + math.sqrt(delta) * v1[i]))
    cols = ["t", "x", "z", "v0", "v1", "pi0", "v0_plus_sqrtdelta_v1"]
    return EXIT_OK, np.array(out), cols, {"delta": delta, "n_rows": len(out)}


def cmd_converge(cfg: StudyConfig, pcfg_args):
    utility = build_utility(cfg)
    model = build_model(cfg)
    T = cfg.float("horizon.T", 1.0)
    pcfg = build_path_config(cfg, *pcfg_args)
    study = convergence_study(
        model,
        utility,
        _start(cfg),
        cfg.floats("study.deltas"),
        pcfg,
        T,
        comparator=cfg.str("study.comparator", "v0+sqrt(delta)*v1"),
        control_variate=cfg.bool("mc.control_variate", True),
    )
    lo, hi = cfg.float("study.rate_lo", 0.7), cfg.float("study.rate_hi", 1.3)
    cols = ["delta", "estimate", "stderr", "comparator", "error", "scaled_difference"]
    rows = np.array([[r[c] for c in cols] for r in study.rows()])
    summary = study.summary()
    summary.update({"rate_band": [lo, hi], "passed": study.passes(lo, hi)})
    if study.inconclusive:
        log.warning("study inconclusive: %s", "; ".join(study.notes))
    return (EXIT_OK if summary["passed"] else EXIT_INCONCLUSIVE), rows, cols, summary


def cmd_optimality(cfg: StudyConfig, pcfg_args):
    utility = build_utility(cfg)
    model = build_model(cfg)
    T = cfg.float("horizon.T", 1.0)
    pcfg = build_path_config(cfg, *pcfg_args)
    start = _start(cfg)
    zo = ZerothOrder(model, utility, T)
    fam = StrategyFamily.scaled(
        zo.pi0,
        cfg.float("family.base_scale", 1.0),
        cfg.float("family.perturb_scale", 1.0),
        cfg.float("family.alpha", 0.5),
        cfg.str("family.label", ""),
    )
    rep = optimality_compare(model, utility, fam, start, cfg.floats("study.deltas"), pcfg, T, control_variate=cfg.bool("mc.control_variate", True))
    desc = approximation_select(fam, start, pi0=zo.pi0, T=T)
    cols = ["delta", "difference", "difference_stderr", "scaled_difference", "stderr"]
    rows = np.array([[r[c] for c in cols] for r in rep.rows()])
    summary = rep.summary()
    summary["approximation"] = {
        "expansion": desc.expansion,
        "accuracy_order": desc.accuracy_order,
        "region": desc.region,
        "indeterminate": desc.indeterminate,
    }
    bad = rep.case_tag == "indeterminate" or not rep.never_significantly_positive
    return (EXIT_INCONCLUSIVE if bad else EXIT_OK), rows, cols, summary


def cmd_riccati(cfg: StudyConfig, pcfg_args):
    variant = cfg.str("riccati.variant", "g_moment")
    delta, beta, m = cfg.float("riccati.delta"), cfg.float("riccati.beta"), cfg.float("riccati.m")
    if variant == "g_moment":
        spec = RiccatiSpec.g_moment(delta, beta, m, cfg.float("riccati.w"))
    elif variant in ("wealth_second_moment", "wealth_moment"):
        spec = RiccatiSpec.wealth_second_moment(delta, beta, m, cfg.float("riccati.mu"), cfg.float("riccati.gamma"), cfg.float("riccati.rho"))
    else:
        raise ValidationError(f"unknown Riccati variant {variant!r}", "riccati.variant")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        tab = curve_table(spec, cfg.float("riccati.tau_max", 10.0), cfg.float("riccati.step") if cfg.has("riccati.step") else None)
    for w in caught:
        log.warning("%s", w.message)
    tol = cfg.float("riccati.tol", 1e-8)
    a_c, a_n = tab["A_closed"], tab["A_numeric"]
    # compare away from the vertical asymptote: [0, 0.9 tau_star]
    ok_pts = np.isfinite(a_c) & (tab["tau"] <= 0.9 * tab["tau_star"])
    scale = np.maximum(np.abs(a_c[ok_pts]), 1e-300)
    diff = np.abs(a_n[ok_pts] - a_c[ok_pts])
    rel = np.where(np.abs(a_c[ok_pts]) > 0, diff / scale, diff)
    max_rel = float(rel.max()) if rel.size else 0.0
    cols = ["tau", "A_closed", "A_numeric", "B"]
    rows = np.column_stack([tab["tau"], a_c, a_n, tab["B"]])
    br = tab["tau_star_bracket"]
    summary = {
        "variant": variant,
        "tau_star": tab["tau_star"],
        "tau_star_bracket": None if br is None else list(br),
        "bracket_contains_tau_star": None if br is None else bool(br[0] <= tab["tau_star"] <= br[1]),
        "truncated": tab["truncated"],
        "max_relative_difference": max_rel,
        "comparison_window": [0.0, float(min(tab["tau"][-1], 0.9 * tab["tau_star"]))],
        "tol": tol,
    }
    return (EXIT_OK if max_rel <= tol else EXIT_INCONCLUSIVE), rows, cols, summary


COMMANDS = {
    "merton": cmd_merton,
    "expand": cmd_expand,
    "converge": cmd_converge,
    "optimality": cmd_optimality,
    "riccati": cmd_riccati,
}


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return v


def write_outputs(out_dir: Path, study: str, cols, rows, summary: dict) -> tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{study}.csv"
    json_path = out_dir / f"{study}.summary.json"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in np.atleast_2d(rows):
            w.writerow(["%.17g" % float(v) for v in r])
    with open(json_path, "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, json_path


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slowvol", description="Asymptotic portfolio studies under a slow volatility factor.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="path to a key = value configuration file")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--seed", type=int, default=None, help="override mc.seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, default=None, help="override mc.threads")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.seed is not None and not (0 <= args.seed < 2**64):
            raise ValidationError("seed must be an unsigned 64-bit integer", "--seed")
        if args.threads is not None and args.threads <= 0:
            raise ValidationError("threads must be positive", "--threads")
        cfg = load_config(args.config)
        status, rows, cols, summary = COMMANDS[args.command](cfg, (args.seed, args.threads))
        study = cfg.str("study.name", args.command)
        summary = {
            "command": args.command,
            "status": {EXIT_OK: "pass", EXIT_INCONCLUSIVE: "inconclusive"}[status],
            "exit_code": status,
            "config": cfg.as_dict(),
            "seed_override": args.seed,
            "result": summary,
        }
        csv_path, json_path = write_outputs(Path(args.out), study, cols, rows, summary)
        log.info("wrote %s and %s", csv_path, json_path)
        return status
    except (ValidationError, DomainError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConvergenceError, NumericalDifferentiationError, OverflowGuardError, ExplosionError, RangeError, SimulationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
