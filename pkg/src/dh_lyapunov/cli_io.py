"""Command line front end: config parsing, atomic result files, fixed-point cache.

    dh-lab <validate|alpha|lyapunov|fixed-point|dh-verify|sweep|schema> --config cfg.json
           [--out DIR] [--cache DIR] [--seed N] [--eps 0.1,0.05] [--beta B] [--grid N] [--steps N]

Exit codes: 0 success, 2 invalid input or regime, 3 numerical failure,
4 acceptance threshold missed in dh-verify.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import time
import warnings as _warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .alpha_delta import alpha_report, find_delta, solve_alpha
from .chain_sim import ChainConfig, LyapunovEstimate, lyapunov_matrix, lyapunov_mc, lyapunov_s_chain
from .dh_asymptotics import SweepRow, eps_zero_objects, scaling_sweep
from .dist_models import REF1_SPEC, DistributionModel, spec_from_dict, validate_regime
from .errors import DHLabError, NoConvergence
from .transfer_grid import (
    OperatorConfig,
    L_functional,
    fixed_point_nu,
    fixed_point_omega0,
    grid_from_csv,
    grid_sidecar,
    grid_to_csv,
)

SCHEMA_VERSION = 1
CACHE_ENV = "DH_LAB_CACHE"
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_ACCEPTANCE = 0, 2, 3, 4
COMMANDS = ("validate", "alpha", "lyapunov", "fixed-point", "dh-verify", "sweep", "schema")
_INVALID = ("ValidationError", "RegimeViolation", "InvalidParameter", "OutOfRange", "DomainTooNarrow")

CSV_SCHEMA = {
    "lyapunov": {
        "epsilon": "coupling eps",
        "method": "sigma_chain | s_chain | matrix_product",
        "mean": "batch-means estimate of L(eps)",
        "std_error": "standard error from batch means",
        "n_effective": "summand variance over squared standard error, capped at the step count",
        "seed": "RNG seed (shared Z stream across methods)",
    },
    "sweep": {
        "epsilon": "coupling eps",
        "L_mc": "Monte Carlo estimate (nan when not run)",
        "L_mc_err": "its standard error",
        "L_transfer": "L_eps[nu_eps] from the transfer-operator fixed point",
        "L_transfer_err": "|L(N) - L(N/2)| grid error estimate",
        "prediction": "C_mu eps^(2 alpha)",
        "defect_norm": "||T_eps g - g||_beta for the normalized pasted measure g",
        "budget": "c_beta eps^(2 beta) defect_norm",
        "L_gamma": "L_eps of the normalized pasted measure",
        "mass0": "pre-normalization mass of the pasted measure",
        "pasting_ratio": "a(eps) G_omega0(eps) / G_nu0(1/eps)",
        "iterations": "Picard iterations for nu_eps",
        "budget_ok": "|L_transfer - prediction| <= budget + slack",
        "literal_ok": "|L_transfer - L_gamma| <= budget + numeric slack",
        "failed": "error text when the row failed",
    },
    "grid": {"node": "grid abscissa t (s chart) or sigma", "value": "tail G(t) = measure of (t, inf)"},
}


# config ----------------------------------------------------------------------------


@dataclass
class RunConfig:
    command: str
    model_spec: dict
    seed: int | None = None
    eps: list = field(default_factory=lambda: [0.1, 0.05, 0.02, 0.01])
    grid: int = 2048
    steps: int = 1_000_000
    beta: float | None = None
    y: float | None = None
    tol: float = 1e-9
    role: str = "nu"
    im_max: float = 100.0
    out: Path = Path("dh_out")
    cache: Path | None = None

    def echo(self):
        return {"command": self.command, "model": self.model_spec, "seed": self.seed, "eps": self.eps,
                "grid": self.grid, "steps": self.steps, "beta": self.beta, "y": self.y, "tol": self.tol,
                "role": self.role, "im_max": self.im_max}

    def model(self):
        return DistributionModel(spec_from_dict(self.model_spec))

    def op_config(self):
        return OperatorConfig(grid_size=self.grid, tol=self.tol)


def _model_doc(value, base):
    if value is None or value == "ref1":
        from .dist_models import spec_to_dict

        return spec_to_dict(REF1_SPEC)
    if isinstance(value, dict):
        return value
    text = str(value).strip()
    if text.startswith("{"):
        return json.loads(text)
    path = Path(text)
    if not path.is_absolute() and base is not None:
        path = base / path
    return json.loads(path.read_text())


def _parse_eps(text):
    if isinstance(text, (list, tuple)):
        return [float(e) for e in text]
    return [float(e) for e in str(text).split(",") if e.strip()]


def build_config(args):
    doc = {}
    base = None
    if args.config:
        cfg_path = Path(args.config)
        doc = json.loads(cfg_path.read_text())
        base = cfg_path.parent
    model_doc = _model_doc(args.model if args.model is not None else doc.get("model"), base)
    cache = args.cache or doc.get("cache") or os.environ.get(CACHE_ENV)
    cfg = RunConfig(command=args.command, model_spec=model_doc)
    for key in ("seed", "grid", "steps", "beta", "y", "tol", "role", "im_max"):
        val = getattr(args, key, None)
        if val is None:
            val = doc.get(key)
        if val is not None:
            setattr(cfg, key, val)
    eps = args.eps if args.eps is not None else doc.get("eps")
    if eps is not None:
        cfg.eps = _parse_eps(eps)
    cfg.out = Path(args.out or doc.get("out") or "dh_out")
    cfg.cache = Path(cache) if cache else None
    cfg.seed = None if cfg.seed is None else int(cfg.seed)
    cfg.grid, cfg.steps = int(cfg.grid), int(cfg.steps)
    _check_config(cfg)
    return cfg


def _check_config(cfg):
    from .errors import InvalidParameter

    if cfg.command in ("lyapunov", "dh-verify") and cfg.seed is None:
        raise InvalidParameter(f"{cfg.command} needs an explicit --seed")
    if cfg.seed is not None and not (0 <= cfg.seed < 2**64):
        raise InvalidParameter("seed must be an unsigned 64-bit integer")
    if any(not (-1 < e < 1) for e in cfg.eps):
        raise InvalidParameter("every eps must lie in (-1, 1)")
    if cfg.grid < 16 or cfg.steps < 1000:
        raise InvalidParameter("grid must be >= 16 and steps >= 1000")
    if cfg.role not in ("nu", "omega0"):
        raise InvalidParameter("role must be 'nu' or 'omega0'")


# files and cache ------------------------------------------------------------------------


def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def dumps(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def rows_to_csv(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def param_hash(*parts):
    text = json.dumps(_jsonable(parts), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


class FixedPointCache:
    """Content-addressed store of TailGrids: <root>/<key[:2]>/<key>.csv plus .json sidecar."""

    def __init__(self, root):
        self.root = Path(root) if root else None
        self.hits = 0
        self.misses = 0

    def _paths(self, key):
        d = self.root / key[:2]
        return d / f"{key}.csv", d / f"{key}.json"

    def get(self, key):
        if self.root is None:
            return None
        csv_path, js_path = self._paths(key)
        if not (csv_path.exists() and js_path.exists()):
            return None
        self.hits += 1
        return grid_from_csv(csv_path.read_text(), json.loads(js_path.read_text()))

    def put(self, key, grid):
        if self.root is None:
            return
        csv_path, js_path = self._paths(key)
        atomic_write(csv_path, grid_to_csv(grid))
        atomic_write(js_path, dumps(grid_sidecar(grid, key)))

    def fetch(self, key, compute):
        got = self.get(key)
        if got is not None:
            return got
        self.misses += 1
        grid = compute()
        self.put(key, grid)
        # round-trip so cold and warm runs see the same bits
        return grid_from_csv(grid_to_csv(grid), grid_sidecar(grid, key))


def _op_params(cfg):
    oc = cfg.op_config()
    return {"grid_size": oc.grid_size, "tol": oc.tol, "quad_points": oc.quad_points, "max_iter": oc.max_iter,
            "nu0_t_max": oc.nu0_t_max, "sigma_floor": oc.sigma_floor}


class Solvers:
    """Fixed-point solvers routed through the cache."""

    def __init__(self, cfg, model, alpha):
        self.cfg, self.model, self.alpha = cfg, model, alpha
        self.cache = FixedPointCache(cfg.cache)

    def nu(self, eps, op_cfg=None):
        op_cfg = op_cfg or OperatorConfig(epsilon=eps, grid_size=self.cfg.grid, tol=self.cfg.tol)
        params = {"eps": float(eps), "grid_size": op_cfg.grid_size, "tol": op_cfg.tol,
                  "quad_points": op_cfg.quad_points, "nu0_t_max": op_cfg.nu0_t_max, "alpha": self.alpha}
        key = param_hash(self.model.hash, "fixed_point_nu", params)
        return self.cache.fetch(key, lambda: fixed_point_nu(self.model, eps, op_cfg, alpha=self.alpha))

    def omega0(self, y=None):
        oc = self.cfg.op_config()
        params = {"y": y, **_op_params(self.cfg), "alpha": self.alpha}
        key = param_hash(self.model.hash, "fixed_point_omega0", params)
        return self.cache.fetch(key, lambda: fixed_point_omega0(self.model, y=y, config=oc, alpha=self.alpha))


# commands ------------------------------------------------------------------------------


@dataclass
class Outcome:
    payload: dict
    csv_columns: tuple | None = None
    csv_rows: list | None = None
    warnings: list = field(default_factory=list)
    exit_code: int = EXIT_OK
    run_info: dict = field(default_factory=dict)


def cmd_validate(cfg):
    rep = validate_regime(cfg.model())
    return Outcome(rep.to_dict(), warnings=list(rep.messages) if not rep.dh_ok else [],
                   exit_code=EXIT_OK if rep.dh_ok else EXIT_INVALID)


def cmd_alpha(cfg):
    rep = alpha_report(cfg.model(), im_max=cfg.im_max)
    return Outcome(rep.to_dict(), warnings=list(rep.warnings))


def cmd_lyapunov(cfg):
    model = cfg.model()
    rows, ests = [], []
    for eps in cfg.eps:
        cc = ChainConfig.create(eps, cfg.steps, cfg.seed, model=model)
        batch = [lyapunov_mc(model, cc), lyapunov_matrix(model, cc)]
        if eps != 0:
            batch.append(lyapunov_s_chain(model, cc))
        for est in batch:
            ests.append(est.to_dict())
            rows.append(est.csv_row())
    warn = [w for e in ests for w in e["warnings"]]
    return Outcome({"estimates": ests}, LyapunovEstimate.CSV_COLUMNS, rows, warn)


def cmd_fixed_point(cfg):
    model = cfg.model()
    alpha, _ = solve_alpha(model)
    sol = Solvers(cfg, model, alpha)
    grids = []
    if cfg.role == "omega0":
        g = sol.omega0(cfg.y)
        grids.append(("omega0", g, None))
    else:
        for eps in cfg.eps:
            g = sol.nu(abs(eps))
            grids.append((f"nu_eps{abs(eps)!r}", g, L_functional(g, abs(eps))))
    payload = {"alpha": alpha, "grids": []}
    for name, g, L in grids:
        stem = f"grid_{model.hash}_{name}"
        atomic_write(cfg.out / f"{stem}.csv", grid_to_csv(g))
        side = grid_sidecar(g, param_hash(_op_params(cfg)))
        atomic_write(cfg.out / f"{stem}.json", dumps(side))
        payload["grids"].append({"name": name, "file": f"{stem}.csv", "L": L, **side})
    return Outcome(payload, run_info={"cache": {"hits": sol.cache.hits, "misses": sol.cache.misses}})


def _sweep(cfg, with_mc):
    model = cfg.model()
    warn = []
    alpha, _ = solve_alpha(model)
    delta = find_delta(model, alpha, im_max=cfg.im_max, warnings=warn)
    sol = Solvers(cfg, model, alpha)
    zero = eps_zero_objects(model, alpha, cfg.op_config(), y=cfg.y, nu0=sol.nu(0.0), omega0=sol.omega0(cfg.y))
    chain = {"n_steps": cfg.steps, "seed": cfg.seed} if with_mc else None
    eps_list = sorted({abs(e) for e in cfg.eps if e != 0}, reverse=True)
    rep = scaling_sweep(model, eps_list, beta=cfg.beta, chain_cfg=chain, op_cfg=cfg.op_config(),
                        alpha=alpha, delta=delta, zero=zero, nu_solver=lambda e, oc: sol.nu(e, oc))
    payload = rep.to_dict()
    rows = [r.csv_row() for r in rep.rows]
    out = Outcome(payload, SweepRow.CSV_COLUMNS, rows, warn + [w for w in rep.warnings if w not in warn])
    out.run_info["cache"] = {"hits": sol.cache.hits, "misses": sol.cache.misses}
    return rep, out


def acceptance_checks(rep, with_mc):
    """Pass/fail of the headline scaling checks on a sweep report."""
    rows = [r for r in rep.rows if not r.failed]
    checks = {}
    two_a = 2 * rep.alpha
    checks["slope"] = abs(rep.fitted_global_exponent - two_a) <= 0.1
    devs = [abs(r.L_transfer / r.epsilon**two_a / rep.C_mu - 1) for r in rows]
    checks["amplitude"] = bool(devs) and devs[-1] <= 0.15 and all(b <= a for a, b in zip(devs, devs[1:]))
    if with_mc:
        checks["cross_method"] = all(
            abs(r.L_mc - r.L_transfer) <= 4 * math.hypot(r.L_mc_err, r.L_transfer_err) for r in rows)
    if len(rows) >= 2:
        slope = float(np.polyfit(np.log([r.epsilon for r in rows]), np.log([r.defect_norm for r in rows]), 1)[0])
        checks["defect_exponent"] = slope >= min(two_a, rep.alpha + rep.delta) - rep.beta_used - 0.15
    checks["budget"] = all(r.budget_ok for r in rows) and len(rows) == len(rep.rows)
    return {k: bool(v) for k, v in checks.items()}


def cmd_dh_verify(cfg):
    rep, out = _sweep(cfg, with_mc=True)
    checks = acceptance_checks(rep, True)
    out.payload["acceptance"] = checks
    if not all(checks.values()):
        out.exit_code = EXIT_ACCEPTANCE
    return out


def cmd_sweep(cfg):
    return _sweep(cfg, with_mc=cfg.seed is not None)[1]


def cmd_schema(cfg):
    return Outcome({"csv_columns": CSV_SCHEMA, "exit_codes": {"0": "success", "2": "invalid input or regime",
                                                              "3": "numerical non-convergence",
                                                              "4": "acceptance threshold missed"}})


HANDLERS = {"validate": cmd_validate, "alpha": cmd_alpha, "lyapunov": cmd_lyapunov,
            "fixed-point": cmd_fixed_point, "dh-verify": cmd_dh_verify, "sweep": cmd_sweep, "schema": cmd_schema}


# entry point ----------------------------------------------------------------------------


def make_parser():
    p = argparse.ArgumentParser(prog="dh-lab", description="Lyapunov exponent laboratory for [[1,e],[eZ,Z]] products")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--model", help="'ref1', inline JSON spec, or path to a spec file")
        sp.add_argument("--out", help="output directory (default dh_out)")
        sp.add_argument("--cache", help=f"fixed-point cache root (overrides ${CACHE_ENV})")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--eps", help="comma-separated eps list")
        sp.add_argument("--beta", type=float)
        sp.add_argument("--grid", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--y", type=float, help="omega_0 normalization point")
        sp.add_argument("--tol", type=float)
        sp.add_argument("--role", choices=("nu", "omega0"))
        sp.add_argument("--im-max", dest="im_max", type=float)
        sp.add_argument("--timings", action="store_true", help="embed wall times in the envelope")
    return p


def _exit_for(exc):
    if type(exc).__name__ in _INVALID or isinstance(exc, (json.JSONDecodeError, FileNotFoundError, KeyError)):
        return EXIT_INVALID
    return EXIT_NUMERIC


def run(argv=None, stdout=None):
    stdout = stdout or sys.stdout
    args = make_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = build_config(args)
    except (DHLabError, ValueError, OSError, KeyError) as exc:
        print(f"error [{getattr(exc, 'code', type(exc).__name__)}]: {exc}", file=sys.stderr)
        return EXIT_INVALID
    with _warnings.catch_warnings(record=True) as caught:
        _warnings.simplefilter("always")
        try:
            out = HANDLERS[cfg.command](cfg)
        except DHLabError as exc:
            code = _exit_for(exc)
            print(f"error [{exc.code}]: {exc}", file=sys.stderr)
            return code
        except (ValueError, KeyError, OSError) as exc:
            print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
            return EXIT_INVALID
    warns = list(out.warnings)
    for w in caught:
        msg = str(w.message)
        if msg not in warns:
            warns.append(msg)
    try:
        model_hash = cfg.model().hash
    except DHLabError:
        model_hash = ""
    envelope = {"schema_version": SCHEMA_VERSION, "model_hash": model_hash, "command": cfg.command,
                "config": cfg.echo(), "payload": out.payload, "warnings": warns, "exit_code": out.exit_code}
    timings = {"wall_seconds": time.perf_counter() - t0}
    if args.timings:
        envelope["timings"] = timings
    # run-specific facts live beside the envelope so the envelope stays reproducible
    run_info = {"timings": timings, **out.run_info}
    stem = f"{cfg.command}_{model_hash}"
    if cfg.command != "schema":
        atomic_write(cfg.out / f"{stem}.json", dumps(envelope))
        atomic_write(cfg.out / f"{stem}.run.json", dumps(run_info))
        if out.csv_columns is not None:
            atomic_write(cfg.out / f"{stem}.csv", rows_to_csv(out.csv_columns, out.csv_rows))
    stdout.write(dumps(envelope if cfg.command != "schema" else out.payload))
    for w in warns:
        print(f"warning: {w}", file=sys.stderr)
    return out.exit_code


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
