"""Print the finite-difference gradient audit table for every model block."""

import argparse
import sys

from ema_ats.gradcheck import format_report, gradient_audit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--per-tensor", type=int, default=6)
    args = ap.parse_args()
    ok = True
    for seed in args.seeds:
        reports = gradient_audit(seed=seed, per_tensor=args.per_tensor)
        print(f"seed {seed}")
        print(format_report(reports))
        ok &= all(r.passed for r in reports)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
