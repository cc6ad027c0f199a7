"""Empirical-velocity error against N for a constant and a singular kernel.

    python scripts/chaos_scaling.py [--Ns 100 300 1000 3000] [--replicas 8]
"""
import argparse
import json

from mvsde import config
from mvsde.constants import build_bundle
from mvsde.kernels import power_law
from mvsde.meanfield import MCParams, picard
from mvsde.particles import chaos_error
from mvsde.scenario import components


def reference(kernel, comp, bundle, samples, seed):
    fp = picard(None, bundle.tau, 1e-12, 5, kernel, comp.w, comp.spec, bundle,
                [-0.4, -0.4], [0.4, 0.4], [3, 3], 2, MCParams(samples, 1, seed, 1, 20))
    return fp.iterates[-1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--Ns", type=int, nargs="+", default=[100, 300, 1000, 3000])
    ap.add_argument("--replicas", type=int, default=8)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--reference-samples", type=int, default=200_000)
    ap.add_argument("--json", action="store_true", help="dump the full result")
    args = ap.parse_args(argv)

    comp = components(config.desk_scenario())
    b = comp.bundle
    const = power_law(2, 1.0, 0.0)
    b_const = build_bundle(2, b.xi, b.A, b.kappa, 1.0, 0.0, comp.w.w1, comp.w.winf)
    out = {}
    for name, kernel, bundle in (("constant", const, b_const),
                                 ("biot-savart", comp.kernel, b)):
        ref = reference(kernel, comp, bundle, args.reference_samples, args.seed)
        res = chaos_error(args.Ns, ref, bundle.tau, ref.node_points().reshape(-1, 2),
                          comp.w, kernel, comp.spec, args.replicas, args.seed)
        out[name] = res
        print(f"{name}: slope {res['slope']:.3f}, monotone {res['monotone']}")
        for r in res["rows"]:
            print(f"  N={r['N']:>6}  mean {r['mean_error']:.4e} +/- {r['mean_stderr']:.1e}"
                  f"  max {r['max_error']:.4e}")
    if args.json:
        print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
