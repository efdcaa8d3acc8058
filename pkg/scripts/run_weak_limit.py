"""SPDE interface ensemble followed by the comparison against the limit SDE."""

import argparse
from pathlib import Path

from aclab.harness import load_config, run_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--paths", type=int, help="override the number of SPDE paths")
    args = ap.parse_args()
    sim_cfg = load_config(CONFIGS / "weak_limit.toml")
    if args.paths:
        sim_cfg["run"]["paths"] = args.paths
    spde_dir = Path(args.out) / "weak_limit"
    sim = run_config(sim_cfg, spde_dir, args.threads)
    print(f"simulate: {sim.summary}")
    cmp_cfg = load_config(CONFIGS / "weak_limit_compare.toml")
    cmp_cfg["compare"]["spde"] = str(spde_dir)
    rec = run_config(cmp_cfg, Path(args.out) / "weak_limit_compare", args.threads)
    for g in rec.gates:
        print(f"[{'pass' if g.passed else 'FAIL'}] {g.name} = {g.value:.4g} (bound {g.bound})")


if __name__ == "__main__":
    main()
