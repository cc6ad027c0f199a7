"""Tabulate the contraction factor against the horizon for the desk scenario.

Prints ``tau / T_L`` and the factor, marking ``tau_max`` and the largest
horizon at which the factor stays below one.

    python scripts/contraction_horizon.py [--config path.yaml]
"""
import argparse

import numpy as np

from mvsde import config
from mvsde.constants import contraction_factor
from mvsde.scenario import components


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--points", type=int, default=12)
    args = ap.parse_args(argv)
    cfg = config.load(args.config) if args.config else config.desk_scenario()
    b = components(cfg).bundle
    print(f"C0 = {b.C0:.6g}  xi = {b.xi:g}  T_L = {b.T_L:.6g}")
    print(f"tau_max = {b.tau_max:.6g}  tau_contract = {b.tau_contract:.6g}  "
          f"ratio = {b.tau_contract / b.tau_max:.3g}")
    print(f"{'tau/T_L':>10} {'factor':>10}")
    for tau in np.geomspace(b.tau_contract / 100, b.T_L, args.points):
        tag = ""
        if tau <= b.tau_contract:
            tag = "contracts"
        elif tau < b.tau_max:
            tag = "below tau_max, no contraction"
        print(f"{tau / b.T_L:10.3e} {contraction_factor(b.C0, b.xi, tau):10.4f}  {tag}")


if __name__ == "__main__":
    main()
