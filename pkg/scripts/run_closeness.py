"""Closeness scan across epsilon with the shipped config; prints the scan table and the gates."""

import argparse
from pathlib import Path

from aclab.harness import load_config, run_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/closeness")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    rec = run_config(load_config(CONFIGS / "closeness.toml"), args.out, args.threads)
    print("eps  threshold  median  p95  fraction  paths  stopped  steps")
    for row in rec.summary["table"]:
        print("  ".join(f"{v:.4g}" if isinstance(v, float) else str(v) for v in row))
    print(f"slope {rec.summary['slope']:.3f}, 95% CI {rec.summary['slope_ci95']}")
    for g in rec.gates:
        print(f"[{'pass' if g.passed else 'FAIL'}] {g.name} = {g.value:.4g} (bound {g.bound})")


if __name__ == "__main__":
    main()
