"""Run the acceptance checks directly and write their reports as JSON.

    python scripts/run_acceptance.py [--only 1 7] [--out acceptance.json]
"""
import argparse
import json
import time

from mvsde import verify


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--only", type=int, nargs="+", default=None)
    ap.add_argument("--out", default="acceptance.json")
    args = ap.parse_args(argv)
    results = []
    for k in sorted(verify.CHECKS):
        if args.only and k not in args.only:
            continue
        t0 = time.perf_counter()
        res = verify.CHECKS[k]()
        res["seconds"] = time.perf_counter() - t0
        results.append(res)
        print(f"[{'PASS' if res['pass'] else 'FAIL'}] criterion {k}: {res['name']} "
              f"({res['seconds']:.1f} s)")
    with open(args.out, "w") as fh:
        json.dump(results, fh, indent=2, default=float)
    return 0 if all(r["pass"] for r in results) else 1


if __name__ == "__main__":
    raise SystemExit(main())
