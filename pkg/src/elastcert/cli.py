"""Command-line entry point: config ingestion, dispatch and report emission.

Exit codes: 0 success or certified, 2 inconclusive verdict, 3 validation
error, 4 numerical failure. Reports are deterministic JSON (sorted keys);
only ``wall_time`` varies between identical runs.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .container import (ConfigError, field_to_csv, measure_to_csv, problem_from_config, save_dual,
                        save_field, save_planflux)

COMMANDS = ("eigen", "certify", "gallery", "relax-solve", "duality-audit")
EXIT_OK, EXIT_INCONCLUSIVE, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3, 4

DEFAULT_AFFINE = [[1.2, 0.3], [0.1, 0.9]]

DEFAULT_PROBLEMS = {
    "eigen": {"gallery": "affine", "params": {"A": [[1.0, 0.0], [0.0, 1.0]]}, "n": 128},
    "certify": {"gallery": "affine", "params": {"A": DEFAULT_AFFINE}, "n": 32},
    "gallery": {"gallery": "affine", "params": {"A": DEFAULT_AFFINE}, "n": 32},
    "relax-solve": {"gallery": "affine", "params": {"A": [[1.0]]}, "n": 31},
    "duality-audit": {"gallery": "affine", "params": {"A": [[1.0]]}, "n": 15},
}

DEFAULT_NUMERICS = {
    "eigen": {"tol": 1e-8, "richardson": True},
    "certify": {"tol": None, "subsamples": 4, "basis_size": 3, "eigen_tol": 1e-8},
    "gallery": {"subsamples": 4, "basis_size": 3},
    "relax-solve": {"tol": 1e-6, "max_iter": 50000, "method": "auto", "trace_every": 10, "basis_size": 3},
    "duality-audit": {"pairs": 200, "target_spread": 0.0, "competitor": True},
}

GALLERY_DEFAULT_PARAMS = {"affine": {"A": DEFAULT_AFFINE}, "torsion": {"a": 1.0}, "identity_potential": {}}


def _json_safe(v):
    if isinstance(v, dict):
        return {str(k): _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, np.ndarray):
        return _json_safe(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return v


def resolve_config(raw: dict, args: argparse.Namespace | None = None) -> dict:
    """Fill defaults and apply command-line overrides; raises ConfigError."""
    cfg = copy.deepcopy(raw or {})
    if args is not None and args.command:
        cfg["command"] = args.command
    cmd = cfg.get("command")
    if cmd not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}, got {cmd!r}")
    problem = cfg.get("problem")
    if args is not None and args.gallery:
        if problem is None or problem.get("gallery") != args.gallery:
            problem = {"gallery": args.gallery, "params": copy.deepcopy(GALLERY_DEFAULT_PARAMS.get(args.gallery, {})),
                       "n": DEFAULT_PROBLEMS[cmd]["n"]}
    if problem is None:
        problem = copy.deepcopy(DEFAULT_PROBLEMS[cmd])
    if not isinstance(problem, dict):
        raise ConfigError("problem must be an object")
    problem.setdefault("n", DEFAULT_PROBLEMS[cmd]["n"])
    if args is not None and args.n is not None:
        problem["n"] = args.n
    if args is not None and args.a is not None:
        problem.setdefault("params", {})["a"] = args.a
    num = dict(DEFAULT_NUMERICS[cmd])
    num.update(cfg.get("numerics") or {})
    if args is not None and args.tol is not None:
        num["tol"] = args.tol
    for key in ("tol", "eigen_tol"):
        if num.get(key) is not None and not (isinstance(num[key], (int, float)) and num[key] > 0):
            raise ConfigError(f"{key} must be positive")
    cfg["numerics"] = num
    cfg["problem"] = problem
    cfg["seed"] = int(args.seed if args is not None and args.seed is not None else cfg.get("seed", 0))
    cfg["threads"] = int(args.threads if args is not None and args.threads is not None else cfg.get("threads", 1))
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    cfg["out"] = str(args.out if args is not None and args.out is not None else cfg.get("out", "elastcert_out"))
    n = problem["n"]
    if not isinstance(n, int) or isinstance(n, bool) or n < 2:
        raise ConfigError(f"resolution n must be an integer >= 2, got {n!r}")
    return cfg


# commands ---------------------------------------------------------------------------------

def _cmd_eigen(cfg, spec, pair, out: Path):
    from .domain import dirichlet_lambda1
    num = cfg["numerics"]
    res = dirichlet_lambda1(spec.grid_omega, tol=num["tol"], richardson=bool(num["richardson"]))
    save_field(out / "eigenfunction.bin", res.eigenfunction, "eigenfunction")
    body = {k: getattr(res, k) for k in ("lambda1", "lambda1_safe", "safety", "safety_constant", "iterations",
                                           "residual", "lambda1_coarse")}
    body["meta"] = res.meta
    body["grid"] = {"shape": spec.grid_omega.spec.shape, "resolution": list(spec.grid_omega.resolution)}
    return body, EXIT_OK


def _cmd_certify(cfg, spec, pair, out: Path):
    from .certificate import certify, local_radius
    if pair is None:
        raise ConfigError("certify needs an equilibrium pair (gallery problem or u/omega files)")
    num = cfg["numerics"]
    rep = certify(pair, spec, residual_tol=num.get("tol"), basis_size=int(num["basis_size"]),
                  subsamples=int(num["subsamples"]), eigen_tol=float(num["eigen_tol"]))
    body = rep.to_dict()
    if spec.W.lambda_W > 0:
        body["local_radius"] = local_radius(pair.omega, spec, rep.lambda_hat)
    return body, EXIT_OK if rep.verdict != "inconclusive" else EXIT_INCONCLUSIVE


def _cmd_gallery(cfg, spec, pair, out: Path):
    from .energy import energy_terms, pushforward
    from .equilibrium import el_residual
    if pair is None:
        raise ConfigError("gallery needs a gallery problem")
    num = cfg["numerics"]
    terms = energy_terms(pair.u, spec, int(num["subsamples"]))
    mu = pushforward(pair.u, spec.grid_D, int(num["subsamples"]), grid_omega=spec.grid_omega)
    save_field(out / "u.bin", pair.u, "u")
    save_field(out / "omega.bin", pair.omega, "omega")
    field_to_csv(out / "u.csv", pair.u)
    field_to_csv(out / "omega.csv", pair.omega)
    measure_to_csv(out / "density.csv", mu)
    body = {"family": pair.family, "energy": terms, "el_residual": el_residual(pair, spec, int(num["basis_size"])),
            "boundary_deviation": pair.check_boundary(spec),
            "grid": {"omega_nodes": spec.grid_omega.n_nodes, "D_nodes": spec.grid_D.n_nodes}}
    return body, EXIT_OK


def _cmd_relax(cfg, spec, pair, out: Path):
    from .relaxation import relaxed_energy, solve_relaxation
    num = cfg["numerics"]
    pf, trace = solve_relaxation(spec, max_iter=int(num["max_iter"]), tol=float(num["tol"]),
                                 trace_every=int(num["trace_every"]), basis_size=int(num["basis_size"]),
                                 method=num["method"])
    trace.to_csv(out / "trace.csv")
    save_planflux(out / "planflux.bin", pf)
    last = trace.rows[-1] if trace.rows else {}
    body = {"converged": trace.converged, "iterations": trace.iterations, "relaxed_energy": relaxed_energy(pf, spec),
            "final": last, "solver": trace.meta}
    return body, EXIT_OK if trace.converged else EXIT_NUMERICAL


def _cmd_audit(cfg, spec, pair, out: Path):
    from .energy import eval_energy
    from .relaxation import (build_dual_competitor, duality_gap, equality_diagnostics, lift,
                             weak_duality_audit)
    num = cfg["numerics"]
    res = weak_duality_audit(spec, pairs=int(num["pairs"]), seed=cfg["seed"],
                             target_spread=float(num["target_spread"]))
    body = {"random": res}
    if num.get("competitor") and pair is not None:
        pf = lift(pair.u, spec)
        dt = build_dual_competitor(pair, spec)
        save_planflux(out / "lift.bin", pf)
        save_dual(out / "competitor.bin", dt, spec)
        gap = duality_gap(pf, dt, spec)
        E = eval_energy(pair.u, spec)
        body["competitor"] = {"energy": E, "gap": gap.to_dict(), "relative_gap": gap.gap / E if E else None,
                              "diagnostics": equality_diagnostics(pf, dt, spec),
                              "raw_margin": dt.meta.get("raw_margin")}
    return body, EXIT_OK if res["violations"] == 0 else EXIT_NUMERICAL


HANDLERS = {"eigen": _cmd_eigen, "certify": _cmd_certify, "gallery": _cmd_gallery,
            "relax-solve": _cmd_relax, "duality-audit": _cmd_audit}


def execute(cfg: dict, base: Path | None = None) -> tuple[int, dict | None]:
    """Run one resolved config; returns (exit code, report or None)."""
    from .domain import VerificationError
    from .linalg import ConvergenceError
    t0 = time.perf_counter()
    out = Path(cfg["out"])
    try:
        spec, pair = problem_from_config(cfg["problem"], base)
        out.mkdir(parents=True, exist_ok=True)
        body, code = HANDLERS[cfg["command"]](cfg, spec, pair, out)
    except ConfigError as exc:
        print(f"elastcert: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID, None
    except (ConvergenceError, VerificationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        body, code = {"error": f"{type(exc).__name__}: {exc}"}, EXIT_NUMERICAL
    except ValueError as exc:
        print(f"elastcert: {exc}", file=sys.stderr)
        return EXIT_INVALID, None
    report = {"command": cfg["command"], "config": cfg, "results": body, "exit_code": code,
              "version": __version__, "wall_time": time.perf_counter() - t0}
    report = _json_safe(report)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"report_{cfg['command']}.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return code, report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elastcert", description=__doc__.splitlines()[0])
    p.add_argument("command", nargs="?", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file, or - for stdin")
    p.add_argument("--gallery", choices=sorted(GALLERY_DEFAULT_PARAMS), help="gallery problem family")
    p.add_argument("--n", type=int, help="grid resolution (cells per unit length)")
    p.add_argument("--a", type=float, help="torsion rate")
    p.add_argument("--tol", type=float, help="command tolerance")
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--version", action="version", version=f"elastcert {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    base = None
    raw = {}
    try:
        if args.config == "-":
            raw = json.load(sys.stdin)
        elif args.config:
            path = Path(args.config)
            if not path.exists():
                raise ConfigError(f"config file {path} does not exist")
            raw = json.loads(path.read_text())
            base = path.parent
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        cfg = resolve_config(raw, args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"elastcert: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    code, report = execute(cfg, base)
    if report is not None:
        summary = {k: report[k] for k in ("command", "exit_code")}
        res = report["results"]
        for key in ("verdict", "margin", "lambda1", "converged", "relaxed_energy", "error"):
            if key in res:
                summary[key] = res[key]
        print(json.dumps(summary, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
