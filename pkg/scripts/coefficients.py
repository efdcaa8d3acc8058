"""Limit coefficients alpha1, alpha2 with refinement and cross-check diagnostics."""

import argparse
import json

from aclab.correctors import limit_coefficients


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--h", type=float, default=0.05)
    ap.add_argument("--L", type=float, default=30.0)
    args = ap.parse_args()
    lc = limit_coefficients(h=args.h, L=args.L)
    print(json.dumps(lc.to_dict(), indent=2, default=float))


if __name__ == "__main__":
    main()
