"""Command-line entry point: ``mvsde <subcommand> --config FILE``.

Exit codes: 0 pass, 1 check failure, 2 config error, 3 numerical abort.
Every artifact carries the config hash and the seed; JSON is written with
sorted keys and no timestamps so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys

import numpy as np
import yaml

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .constants import build_bundle
from .density import (estimate_density, make_edges, verify_aronson, verify_prop21,
                      verify_theorem31)
from .diffusion import (PENS_TRAILER_MAGIC, NumericalAbort, eval_drift, gaussian_density,
                        simulate_paths)
from .girsanov import compute_weights, moment_check, unit_mean_check
from .meanfield import DivergenceError, MCParams, TargetGrid, apply_K_detailed, picard
from .particles import chaos_error, init_from_vorticity, run
from .scenario import components, drift_from

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3



def _clean(obj):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    return obj


class Writer:
    """Artifact writer that stamps every file with the config hash and seed."""

    def __init__(self, out_dir: str, cfg: RunConfig, subcommand: str):
        self.dir = out_dir
        self.hash = cfgmod.config_hash(cfg)
        self.seed = cfg.seed
        self.scenario = cfg.scenario
        self.sub = subcommand
        os.makedirs(out_dir, exist_ok=True)

    def stamp(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "scenario": self.scenario,
                "subcommand": self.sub}

    def json(self, name: str, payload: dict) -> None:
        doc = {"meta": self.stamp(), "report": _clean(payload)}
        with open(os.path.join(self.dir, name), "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2, allow_nan=False)
            fh.write("\n")

    def csv(self, name: str, header, rows) -> None:
        buf = io.StringIO()
        buf.write(f"# config_hash={self.hash} seed={self.seed}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in r])
        with open(os.path.join(self.dir, name), "w", newline="") as fh:
            fh.write(buf.getvalue())

    def binary(self, name: str, blob: bytes) -> None:
        meta = json.dumps(self.stamp(), sort_keys=True).encode()
        with open(os.path.join(self.dir, name), "wb") as fh:
            fh.write(blob)
            fh.write(PENS_TRAILER_MAGIC + len(meta).to_bytes(4, "little") + meta)


def _field_rows(field):
    pts = field.node_points().reshape(-1, field.d)
    rows = []
    for k, t in enumerate(field.times):
        vals = field.values[k].reshape(-1, field.d)
        rows.extend([float(t), *map(float, x), *map(float, v)] for x, v in zip(pts, vals))
    return rows


def _field_header(d):
    return ["t"] + [f"x{i + 1}" for i in range(d)] + [f"b{i + 1}" for i in range(d)]


# --------------------------------------------------------------------------
# subcommands; each returns (passed, summary line)


def cmd_constants(cfg, w: Writer, args):
    comp = components(cfg)
    b = comp.bundle
    flags = {k: getattr(args, k) for k in ("d", "xi", "A", "kappa", "q", "alpha", "gamma",
                                           "w1", "winf", "R") if getattr(args, k, None) is not None}
    if flags:
        d = flags.get("d", b.d)
        b = build_bundle(d, flags.get("xi", b.xi), flags.get("A", b.A),
                         flags.get("kappa", b.kappa), flags.get("alpha", b.alpha),
                         flags.get("gamma", b.gamma), flags.get("w1", b.w1),
                         flags.get("winf", b.winf), q=flags.get("q", b.q if d == b.d else None),
                         R=flags.get("R"), kappa_prime=b.kappa_prime,
                         tau_fraction=cfg.constants.tau_fraction)
    bad = b.check()
    w.json("constants.json", {"bundle": b.to_dict(), "fitted": comp.fitted, "flags": flags,
                              "violations": bad})
    return not bad, f"C={b.C:.6g} C0={b.C0:.6g} L={b.L:.6g} tau_max={b.tau_max:.6g}"


def cmd_simulate(cfg, w: Writer, args):
    comp = components(cfg)
    s = cfg.simulate
    b = drift_from(s.drift, comp.spec.d, s.horizon, comp.bundle.L)
    ens = simulate_paths(comp.spec, b, s.starts, s.horizon, s.steps, s.paths, cfg.seed)
    if ens.aborted.any():
        raise NumericalAbort(f"{int(ens.aborted.sum())} paths produced non-finite values")
    w.binary("ensemble.pens", ens.to_bytes())
    if cfg.output.csv:
        rows = []
        for p in range(ens.n_paths):
            rows.extend([p, k, float(t), *map(float, ens.positions[p, k])]
                        for k, t in enumerate(ens.times))
        w.csv("ensemble.csv", ["path", "step", "t"] + [f"x{i + 1}" for i in range(ens.d)],
              rows)
    final = [ens.positions[ens.start_index == i, -1].mean(axis=0) for i in range(len(s.starts))]
    w.json("simulate.json", {"paths": ens.n_paths, "steps": ens.steps, "dt": ens.dt,
                             "diffusion": comp.spec.to_dict(), "drift": ens.drift_meta,
                             "final_means": final})
    return True, f"{ens.n_paths} paths x {ens.steps} steps"


def cmd_girsanov(cfg, w: Writer, args):
    comp = components(cfg)
    g = cfg.girsanov
    ens = simulate_paths(comp.spec, None, g.start, g.horizon, g.steps, g.paths, cfg.seed)
    reports, rows = [], []
    for i, dcfg in enumerate(g.drifts):
        b = drift_from(dcfg, comp.spec.d, g.horizon, comp.bundle.L)
        wt = compute_weights(ens, b, comp.spec)
        um = unit_mean_check(wt, g.times)
        mom = [r for p in g.moments for r in moment_check(wt, p, g.times)]
        reports.append({"drift": dcfg.kind, "b_sup": wt.drift_sup, "unit_mean": um,
                        "moments": mom})
        for r in um:
            rows.append([i, dcfg.kind, r["time"], 1.0, r["estimate"], r["stderr"], 1.0,
                         int(r["pass"])])
        for r in mom:
            rows.append([i, dcfg.kind, r["time"], r["p"], r["estimate"], r["stderr"],
                         r["bound"], int(r["pass"])])
    ok = all(r[-1] for r in rows)
    w.json("girsanov.json", {"paths": g.paths, "steps": g.steps, "drifts": reports,
                             "pass": ok})
    if cfg.output.csv:
        w.csv("girsanov.csv", ["drift_index", "drift", "time", "p", "estimate", "stderr",
                               "bound", "pass"], rows)
    return ok, f"{len(rows)} records"


def _grid(gcfg, default_horizon):
    horizon = default_horizon if gcfg.horizon is None else gcfg.horizon
    return TargetGrid.uniform(horizon, gcfg.n_times, gcfg.lo, gcfg.hi, gcfg.nodes)


def _mc(mcfg, seed):
    return MCParams(mcfg.samples, mcfg.paths, seed, mcfg.substeps, mcfg.batches)


def cmd_kop(cfg, w: Writer, args):
    comp = components(cfg)
    k = cfg.kop
    grid = _grid(k.grid, comp.bundle.tau)
    b = drift_from(k.drift, comp.spec.d, grid.times[-1], comp.bundle.L)
    est = apply_K_detailed(b, comp.kernel, comp.w, comp.spec, grid, _mc(k.mc, cfg.seed))
    w.json("kop.json", {"sup_norm": est.field.sup_norm, "max_stderr": est.stderr.max(),
                        "singular_hits": est.singular_hits, "evaluations": est.evaluations,
                        "hit_rate": est.hit_rate, "L": comp.bundle.L,
                        "horizon": grid.times[-1], "meta": est.field.meta})
    if cfg.output.csv:
        w.csv("kop_field.csv", _field_header(comp.spec.d), _field_rows(est.field))
    return True, f"sup |K(b)| = {est.field.sup_norm:.6g}"


def cmd_fixpoint(cfg, w: Writer, args):
    comp = components(cfg)
    f = cfg.fixpoint
    tau = comp.bundle.tau if f.grid.horizon is None else f.grid.horizon
    b0 = drift_from(f.b0, comp.spec.d, tau, comp.bundle.L)
    rep = picard(b0, tau, f.tol, f.max_iter, comp.kernel, comp.w, comp.spec, comp.bundle,
                 f.grid.lo, f.grid.hi, f.grid.nodes, f.grid.n_times, _mc(f.mc, cfg.seed))
    d, floor = rep.differences, rep.noise_floor
    geometric = all(d[i + 1] <= rep.factor * d[i] + floor
                    for i in range(len(d) - 1) if d[i] > floor)
    ok = rep.converged and geometric and all(r < 1 for r in rep.ratios)
    w.json("fixpoint.json", {**rep.to_dict(), "geometric_decay": geometric, "pass": ok,
                             "bundle": comp.bundle.to_dict()})
    if cfg.output.csv:
        w.csv("fixpoint_field.csv", _field_header(comp.spec.d), _field_rows(rep.iterates[-1]))
    return ok, f"{len(d)} iterations, converged={rep.converged}"


def cmd_density(cfg, w: Writer, args):
    comp = components(cfg)
    dc, spec, bundle = cfg.density, comp.spec, comp.bundle
    x = np.asarray(dc.start, dtype=float)
    t = dc.t
    b = drift_from(dc.drift, spec.d, t, bundle.L)
    edges = make_edges(x, dc.half_width, dc.bins, spec.d)
    ens0 = simulate_paths(spec, None, x, t, dc.steps, dc.paths, cfg.seed)
    p_est = estimate_density(ens0, t, edges)
    aronson = verify_aronson(p_est, bundle.kappa, bundle.kappa_prime, x)
    ensb = simulate_paths(spec, b, x, t, dc.steps, dc.paths, cfg.seed + 1)
    pb_est = estimate_density(ensb, t, edges)
    b_sup = 0.0 if b is None else b.sup_norm
    if spec.constant:
        ref = (lambda y: gaussian_density(spec, x, t, y))
    else:
        ref = p_est
    thm = verify_theorem31(pb_est, ref, bundle, b_sup, t, x)
    report = {"aronson": aronson, "perturbed_bound": thm, "t": t, "b_sup": b_sup}
    ok = aronson["pass"] and thm["pass"]
    if spec.constant and b is not None:
        width = None if all(n == 1 for n in b.nodes) else 2 * dc.half_width / dc.bins
        prop = verify_prop21(x, dc.targets, t, b, spec, dc.representation_paths,
                             dc.representation_steps, cfg.seed + 2, bundle=bundle,
                             bin_width=width)
        report["representation"] = prop
        ok = ok and prop["pass"]
    report["pass"] = ok
    w.json("density.json", report)
    if cfg.output.csv:
        from .density import callable_bin_average, correction_coefficient, envelope_bin_average
        lo, hi = pb_est.bin_boxes()
        p_avg = (callable_bin_average(ref, lo, hi) if callable(ref) else ref.density)
        bound = p_avg + correction_coefficient(bundle, b_sup, t) * envelope_bin_average(
            bundle.C, t, lo, hi, x)
        w.csv("density.csv", ["t"] + [f"y{i + 1}" for i in range(spec.d)]
              + ["p_hat", "stderr", "bound"], pb_est.rows(bound))
    return ok, f"aronson={aronson['pass']} perturbed_bound={thm['pass']}"


def cmd_nvortex(cfg, w: Writer, args):
    comp = components(cfg)
    n = cfg.nvortex
    ens = init_from_vorticity(comp.w, n.N, cfg.seed, n.replica, comp.kernel.eps)
    start_total = ens.total_intensity()
    ens = run(ens, n.dt, n.steps, comp.spec if n.noise else None, comp.kernel)
    w.json("nvortex.json", {"N": ens.N, "steps": ens.step_count, "time": ens.time,
                            "eps": ens.eps, "singular_hits": ens.hits,
                            "total_intensity_start": start_total,
                            "total_intensity_end": ens.total_intensity(),
                            "mean_position": ens.positions.mean(axis=0)})
    if cfg.output.csv:
        w.csv("snapshot.csv", ["i"] + [f"x{i + 1}" for i in range(ens.d)] + ["intensity"],
              ens.rows())
    return True, f"N={ens.N} t={ens.time:.6g}"


def cmd_chaos(cfg, w: Writer, args):
    comp = components(cfg)
    c = cfg.chaos
    bundle = comp.bundle
    ref = picard(None, bundle.tau, 1e-12, 5, comp.kernel, comp.w, comp.spec, bundle,
                 c.probe_lo, c.probe_hi, c.probe_nodes, 2,
                 MCParams(c.reference_samples, 1, cfg.seed, 1, 20)).iterates[-1]
    probes = ref.node_points().reshape(-1, comp.spec.d)
    rep = chaos_error(c.Ns, ref, bundle.tau, probes, comp.w, comp.kernel, comp.spec,
                      c.replicas, cfg.seed, c.steps)
    rep["reference_at_probes"] = eval_drift(ref, bundle.tau, probes)
    w.json("chaos.json", {**rep, "pass": rep["monotone"]})
    if cfg.output.csv:
        w.csv("chaos.csv", ["N", "max_error", "max_stderr", "mean_error", "mean_stderr"],
              [[r["N"], r["max_error"], r["max_stderr"], r["mean_error"], r["mean_stderr"]]
               for r in rep["rows"]])
    return rep["monotone"], f"slope={rep['slope']:.3f}"


def cmd_verify_all(cfg, w: Writer, args):
    from . import verify
    only = None if not args.only else {int(k) for k in args.only.split(",")}
    results = verify.run_all(only)
    lines = [f"[{'PASS' if r['pass'] else 'FAIL'}] {r['criterion']}: {r['name']}"
             for r in results]
    w.json("verify.json", {"results": results, "pass": all(r["pass"] for r in results)})
    if not args.quiet:
        print("\n".join(lines))
    return all(r["pass"] for r in results), f"{sum(r['pass'] for r in results)}/{len(results)}"


COMMANDS = {"constants": cmd_constants, "simulate": cmd_simulate, "girsanov": cmd_girsanov,
            "kop": cmd_kop, "fixpoint": cmd_fixpoint, "density": cmd_density,
            "nvortex": cmd_nvortex, "chaos": cmd_chaos, "verify-all": cmd_verify_all}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvsde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="scenario YAML (default: bundled desk scenario)")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. kernel.eps=1e-6")
        p.add_argument("--quiet", action="store_true")
        if name == "constants":
            for flag, typ in (("d", int), ("xi", float), ("A", float), ("kappa", float),
                              ("q", float), ("alpha", float), ("gamma", float),
                              ("w1", float), ("winf", float), ("R", float)):
                p.add_argument(f"--{flag}", type=typ)
        if name == "verify-all":
            p.add_argument("--only", help="comma-separated criterion numbers")
    return parser


def load_config(path, overrides) -> RunConfig:
    if path is None:
        text = cfgmod.desk_scenario_text()
    else:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"<file>: cannot read {path} ({exc.strerror})") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"<root>: invalid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a mapping")
    return cfgmod.from_dict(cfgmod.apply_overrides(data, overrides))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        out = args.out or cfg.output.dir
        writer = Writer(out, cfg, args.command)
        ok, summary = COMMANDS[args.command](cfg, writer, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, DivergenceError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    if not args.quiet:
        print(f"{args.command}: {'pass' if ok else 'FAIL'} ({summary}) -> {out}")
    return EXIT_OK if ok else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
