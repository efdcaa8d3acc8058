"""Command line entry point ``aclab``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .core import AclabError
from .harness import EXIT_VALIDATION, _jsonable, exit_code, load_config, run_config

# flag dest -> (section, key, type)
_OVERRIDES = {
    "half_length": ("grid", "half_length", float),
    "spacing": ("grid", "spacing", float),
    "dt": ("grid", "dt", float),
    "scheme": ("profile", "scheme", str),
    "k": ("spectrum", "k", int),
    "no_refine": ("coeffs", "refine", lambda v: not v),
    "no_cross": ("coeffs", "cross", lambda v: not v),
    "theta": ("state", "theta", float),
    "amplitude": ("state", "amplitude", float),
    "state_seed": ("state", "seed", int),
    "t_extract": ("state", "t_extract", float),
    "y": ("state", "y", float),
    "t": ("state", "t", float),
    "t_flow": ("state", "t_flow", float),
    "paths": ("run", "paths", int),
    "epsilon": ("noise", "epsilon", float),
    "gamma": ("noise", "gamma", float),
    "kappa": ("tracking", "kappa", float),
    "horizon": ("horizon", "horizon_macroscopic_T", float),
    "n_samples": ("horizon", "n_samples", int),
    "no_freeze": ("tracking", "freeze_on_stop", lambda v: not v),
    "spde": ("compare", "spde", str),
    "sde_paths": ("compare", "sde_paths", int),
    "times": ("compare", "times", lambda s: [float(t) for t in s.split(",")]),
    "alpha1": ("compare", "alpha1", float),
    "alpha2": ("compare", "alpha2", float),
    "n": ("identities", "n", int),
    "trials": ("identities", "trials", int),
    "epsilons": ("scan", "epsilons", lambda s: [float(e) for e in s.split(",")]),
    "scan_paths": ("scan", "paths", int),
}


def _globals(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--seed", type=int, default=default, help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, default=default, help="worker threads for path ensembles")
    p.add_argument("--out", default=default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aclab", description="Stochastic Allen-Cahn interface laboratory")
    _globals(ap, None)
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name, help_):
        p = sub.add_parser(name, help=help_)
        _globals(p, argparse.SUPPRESS)
        p.add_argument("--config", help="TOML or JSON config file")
        return p

    def grid(p):
        p.add_argument("--half-length", type=float)
        p.add_argument("--spacing", type=float)

    def state(p):
        grid(p)
        p.add_argument("--theta", type=float)
        p.add_argument("--amplitude", type=float)
        p.add_argument("--state-seed", type=int)

    p = verb("profile", "standing wave tables")
    grid(p)
    p.add_argument("--scheme", choices=("compact", "lattice"))
    p = verb("spectrum", "low eigenpairs of the linearized operator")
    grid(p)
    p.add_argument("--k", type=int)
    p = verb("coeffs", "limit coefficients alpha1, alpha2")
    grid(p)
    p.add_argument("--no-refine", action="store_true", default=None)
    p.add_argument("--no-cross", action="store_true", default=None)
    p = verb("dzeta", "first derivative of the limiting point at a state")
    state(p)
    p.add_argument("--t-extract", type=float)
    p = verb("kernel", "first-order kernel slice p_t(y, .)")
    state(p)
    p.add_argument("--y", type=float)
    p.add_argument("--t", type=float)
    p = verb("flow", "deterministic flow toward the manifold")
    state(p)
    p.add_argument("--t-flow", type=float)

    def noise(p):
        p.add_argument("--epsilon", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--kappa", type=float)
        p.add_argument("--horizon", type=float, help="macroscopic horizon T")
        p.add_argument("--spacing", type=float)
        p.add_argument("--dt", type=float)
        p.add_argument("--n-samples", type=int)
        p.add_argument("--no-freeze", action="store_true", default=None,
                       help="keep running after the stopping time (unconditioned ensemble)")

    p = verb("simulate", "SPDE interface ensemble")
    noise(p)
    p.add_argument("--paths", type=int)
    p = verb("compare", "SPDE ensemble against the limit SDE")
    p.add_argument("--spde", help="simulate output directory")
    p.add_argument("--sde-paths", type=int)
    p.add_argument("--times", help="comma separated macroscopic times")
    p.add_argument("--alpha1", type=float)
    p.add_argument("--alpha2", type=float)
    p = verb("verify-identities", "partition identities and Faa di Bruno checks")
    p.add_argument("--n", type=int)
    p.add_argument("--trials", type=int)
    p = verb("closeness-scan", "sup distance to the manifold across epsilon")
    noise(p)
    p.add_argument("--epsilons", help="comma separated epsilon values")
    p.add_argument("--paths", dest="scan_paths", type=int)
    return ap


def config_from_args(args) -> dict:
    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    cfg.setdefault("experiment", {})["name"] = args.verb
    for dest, (sec, key, conv) in _OVERRIDES.items():
        val = getattr(args, dest, None)
        if val is not None:
            cfg.setdefault(sec, {})[key] = conv(val)
    if args.seed is not None:
        cfg.setdefault("noise", {})["master_seed"] = args.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        out = Path(args.out) if args.out else Path("aclab-out") / args.verb
        rec = run_config(cfg, out, args.threads)
    except AclabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"{rec.experiment}: status {rec.status}, output {rec.out_dir}")
    for k, v in rec.summary.items():
        print(f"  {k}: {json.dumps(_jsonable(v))}")
    for g in rec.gates:
        print(f"  [{'pass' if g.passed else 'FAIL'}] {g.name} = {g.value!r} (bound {g.bound})")
    code = exit_code(rec)
    if code:
        print(f"failed gates: {', '.join(rec.failed_gates())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
