"""Command-line harness for reproducible experiments.

Subcommands drive the library modules from a JSON config file with a
validated key tree; every output file gets a JSON sidecar recording the
master seed, the config hash, and the tool version, so any run can be
reproduced byte-identically from its sidecar.

Exit codes: 0 pass, 1 quantitative-tolerance failure, 2 usage or config
error, 3 numerical-method failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from . import agepde, charcurves, ffode, simulate
from .branching import GenFn, GenFnConvergenceError, RootFromPi, \
    sample_progeny_sizes
from .measure import (
    DiracAt,
    DiscreteMeasure,
    SechSquaredStationary,
    Uniform,
    dirac,
    discretize,
    empirical_measure,
    levy_distance,
)
from .spectral import (
    CertificateMismatchError,
    OperatorIsZeroError,
    classify,
    leading_eigenpair,
    phi_from_theta,
)

EXIT_PASS = 0
EXIT_TOLERANCE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

NUMERICAL_ERRORS = (
    ffode.OdeAbort,
    charcurves.PsiRangeError,
    charcurves.MassDefectError,
    agepde.AgeSupercriticalError,
    GenFnConvergenceError,
    CertificateMismatchError,
    FloatingPointError,
)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

_MEASURE_SCHEMA = {"kind": None, "x": None, "upper": None, "nodes": None}

SCHEMA = {
    "experiment": None,
    "seed": None,
    "out": None,
    "workers": None,
    "snapshot_times": None,
    "measure": _MEASURE_SCHEMA,
    "tree": {"replicas": None, "size_cap": None, "root_age": None},
    "ode": {"model": None, "K": None, "dt": None, "T": None,
            "tail_policy": None, "k_max_csv": None},
    "charcurve": {"t": None, "ds": None},
    "agepde": {"T": None, "dt": None, "stride": None},
    "simulate": {"n": None, "lambda": None, "T": None, "replicas": None,
                 "k_max": None, "mode": None},
    "tolerances": {"levy_sim_age": None, "levy_age_char": None,
                   "l1_v": None, "burn_flux": None},
}

DEFAULTS = {
    "experiment": "run",
    "seed": 0,
    "out": "out",
    "workers": 1,
    "snapshot_times": [0.5, 1.5, 2.5],
    "measure": {"kind": "DiracAt", "x": 0.0, "nodes": 2000},
    "tree": {"replicas": 100000, "size_cap": 100000, "root_age": "FromPi"},
    "ode": {"model": "ForestFire", "K": 4000, "dt": 1e-3, "T": 3.0,
            "tail_policy": "SqrtExtrapolate", "k_max_csv": 100},
    "charcurve": {"t": 2.0, "ds": 1e-3},
    "agepde": {"T": 2.0, "dt": 0.002, "stride": 10},
    "simulate": {"n": 100000, "lambda": None, "T": 2.5, "replicas": 10,
                 "k_max": 100, "mode": "PartitionOnly"},
    "tolerances": {"levy_sim_age": 0.05, "levy_age_char": 0.02,
                   "l1_v": 0.05, "burn_flux": 0.05},
}


def _check_keys(cfg: dict, schema: dict, path: str = "") -> None:
    for key, val in cfg.items():
        if key not in schema:
            raise ConfigError("unknown config key %r" % (path + key))
        sub = schema[key]
        if isinstance(sub, dict):
            if not isinstance(val, dict):
                raise ConfigError("%r must be an object" % (path + key))
            _check_keys(val, sub, path + key + ".")


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise ConfigError("cannot read config: %s" % e)
    except json.JSONDecodeError as e:
        raise ConfigError("config is not valid JSON: %s" % e)
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    _check_keys(cfg, SCHEMA)
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def resolve_config(args) -> dict:
    cfg = _deep_merge(DEFAULTS, load_config(args.config))
    # flag > config > default
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.workers is not None:
        cfg["workers"] = args.workers
    if args.snapshot_times is not None:
        try:
            cfg["snapshot_times"] = [float(x) for x in
                                     args.snapshot_times.split(",")]
        except ValueError:
            raise ConfigError("--snapshot-times must be comma-separated "
                              "numbers")
    return cfg


def build_measure(mcfg: dict) -> DiscreteMeasure:
    kind = mcfg.get("kind")
    if kind == "DiracAt":
        return dirac(float(mcfg.get("x", 0.0)))
    nodes = int(mcfg.get("nodes", 2000))
    if kind == "Uniform":
        return discretize(Uniform(float(mcfg.get("upper", 1.0))), nodes)
    if kind == "SechSquaredStationary":
        return discretize(SechSquaredStationary(), nodes)
    raise ConfigError("unknown measure kind %r" % kind)


def measure_spec(mcfg: dict):
    kind = mcfg.get("kind")
    if kind == "DiracAt":
        return DiracAt(float(mcfg.get("x", 0.0)))
    if kind == "Uniform":
        return Uniform(float(mcfg.get("upper", 1.0)))
    if kind == "SechSquaredStationary":
        return SechSquaredStationary()
    raise ConfigError("unknown measure kind %r" % kind)


def write_sidecar(path: str, cfg: dict, extra: dict | None = None) -> None:
    meta = {
        "seed": cfg["seed"],
        "config_hash": config_hash(cfg),
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        meta.update(extra)
    with open(path + ".meta.json", "w", newline="") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path: str, obj: dict, cfg: dict) -> None:
    with open(path, "w", newline="") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_sidecar(path, cfg)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_spectral(cfg: dict, out: str) -> int:
    pi = build_measure(cfg["measure"])
    try:
        ep = leading_eigenpair(pi)
        verdict = classify(pi, eigenpair=ep)
        phi = phi_from_theta(pi, ep.theta)
    except OperatorIsZeroError:
        summary = {"lambda": 0.0, "classification": "Subcritical",
                   "phi": None, "note": "operator is zero"}
        _write_json(os.path.join(out, "summary.json"), summary, cfg)
        return EXIT_PASS
    path = os.path.join(out, "eigenpair.csv")
    ep.to_csv(pi, path)
    write_sidecar(path, cfg)
    summary = ep.summary()
    summary.update({"classification": verdict.tag.value,
                    "band": verdict.band, "phi": phi})
    _write_json(os.path.join(out, "summary.json"), summary, cfg)
    return EXIT_PASS


def cmd_tree(cfg: dict, out: str) -> int:
    pi = build_measure(cfg["measure"])
    tcfg = cfg["tree"]
    rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"]))
    root = tcfg["root_age"]
    root_age = RootFromPi if root == "FromPi" else float(root)
    sizes, truncated = sample_progeny_sizes(
        pi, root_age, int(tcfg["replicas"]), rng,
        size_cap=int(tcfg["size_cap"]))
    counts = np.bincount(sizes[~truncated], minlength=51)[1:51]
    freq = counts / sizes.size
    path = os.path.join(out, "progeny.csv")
    with open(path, "w", newline="") as fh:
        fh.write("k,frequency\n")
        for k, f in enumerate(freq, start=1):
            fh.write("%d,%.17g\n" % (k, f))
    write_sidecar(path, cfg)
    summary = {
        "replicas": int(sizes.size),
        "mean_size": float(sizes[~truncated].mean())
        if np.any(~truncated) else None,
        "truncation_frequency": float(truncated.mean()),
        "size_cap": int(tcfg["size_cap"]),
    }
    _write_json(os.path.join(out, "summary.json"), summary, cfg)
    return EXIT_PASS


def _ode_initial(cfg: dict, K: int) -> np.ndarray:
    m = cfg["measure"]
    if m.get("kind") == "DiracAt" and float(m.get("x", 0.0)) == 0.0:
        return ffode.monodisperse(K)
    raise ConfigError("ode runs support the monodisperse initial "
                      "condition (measure DiracAt x=0)")


def cmd_ode(cfg: dict, out: str) -> int:
    ocfg = cfg["ode"]
    solver = ffode.SolverConfig(K=int(ocfg["K"]), dt=float(ocfg["dt"]),
                                tail_policy=str(ocfg["tail_policy"]))
    v0 = _ode_initial(cfg, solver.K)
    traj = ffode.solve(str(ocfg["model"]), v0, float(ocfg["T"]), solver)
    path = os.path.join(out, "trajectory.csv")
    traj.to_csv(path, k_max=int(ocfg["k_max_csv"]))
    write_sidecar(path, cfg)
    _write_json(os.path.join(out, "summary.json"), traj.summary(), cfg)
    return EXIT_PASS


def cmd_charcurve(cfg: dict, out: str) -> int:
    ocfg = cfg["ode"]
    ccfg = cfg["charcurve"]
    solver = ffode.SolverConfig(K=int(ocfg["K"]), dt=float(ocfg["dt"]))
    v0 = _ode_initial(cfg, solver.K)
    t = float(ccfg["t"])
    traj = ffode.solve(str(ocfg["model"]), v0, t, solver)
    sol = charcurves.solve_backward(None, t, float(ccfg["ds"]),
                                    v_traj=traj)
    path = os.path.join(out, "charcurve.csv")
    sol.to_csv(path)
    write_sidecar(path, cfg)
    summary = {
        "t": t,
        "psi_at_zero": sol.psi_at_zero,
        "consistency_error": charcurves.consistency_error(sol, traj),
    }
    _write_json(os.path.join(out, "summary.json"), summary, cfg)
    return EXIT_PASS


def cmd_agepde(cfg: dict, out: str) -> int:
    acfg = cfg["agepde"]
    pi0 = build_measure(cfg["measure"])
    traj = agepde.evolve(pi0, float(acfg["T"]), float(acfg["dt"]))
    path = os.path.join(out, "age_summary.csv")
    traj.to_csv(path, stride=int(acfg["stride"]))
    write_sidecar(path, cfg)
    mpath = os.path.join(out, "final_measure.csv")
    traj.measures[-1].to_csv(mpath)
    write_sidecar(mpath, cfg)
    summary = {
        "T": float(acfg["T"]),
        "dt": float(acfg["dt"]),
        "switch_time": traj.switch_time,
        "final_lambda": traj.lambdas[-1],
        "final_phi": traj.phis[-1],
        "final_mean_age": traj.measures[-1].moment(1),
    }
    _write_json(os.path.join(out, "summary.json"), summary, cfg)
    return EXIT_PASS


def _sim_replica(payload):
    (n, lam, T, times, k_max, mode, entropy, spawn_key) = payload
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy, spawn_key=spawn_key))
    run = simulate.run_mfff(n, lam, DiracAt(0.0), T, rng,
                            snapshot_times=times, mode=mode, k_max=k_max)
    snaps = [(s.t, s.ages, s.v) for s in run.snapshots]
    burns = (run.burn_log.times, run.burn_log.sizes, run.burn_log.struck)
    return snaps, burns, run.pair_cohabit_proxy


def _run_replicas(cfg: dict):
    scfg = cfg["simulate"]
    n = int(scfg["n"])
    lam = scfg["lambda"]
    lam = float(lam) if lam is not None else None
    times = [float(t) for t in cfg["snapshot_times"]]
    reps = int(scfg["replicas"])
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(reps)
    payloads = [(n, lam, float(scfg["T"]), times, int(scfg["k_max"]),
                 str(scfg["mode"]), s.entropy, s.spawn_key) for s in seeds]
    workers = int(cfg["workers"])
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sim_replica, payloads))
    else:
        results = [_sim_replica(p) for p in payloads]
    return results, times


def cmd_simulate(cfg: dict, out: str) -> int:
    results, times = _run_replicas(cfg)
    for r, (snaps, burns, proxy) in enumerate(results):
        bpath = os.path.join(out, "replica%03d_burnlog.csv" % r)
        with open(bpath, "w", newline="") as fh:
            fh.write("t,size,vertex\n")
            for t, s, v in zip(*burns):
                fh.write("%.17g,%d,%d\n" % (t, s, v))
        write_sidecar(bpath, cfg, {"replica": r})
        for t, ages, v in snaps:
            tag = ("%g" % t).replace(".", "p")
            mpath = os.path.join(out,
                                 "replica%03d_t%s_measure.csv" % (r, tag))
            empirical_measure(ages).to_csv(mpath)
            write_sidecar(mpath, cfg, {"replica": r, "t": t})
            vpath = os.path.join(out, "replica%03d_t%s_v.csv" % (r, tag))
            with open(vpath, "w", newline="") as fh:
                fh.write("k,v\n")
                for k, vk in enumerate(v, start=1):
                    fh.write("%d,%.17g\n" % (k, vk))
            write_sidecar(vpath, cfg, {"replica": r, "t": t})
    summary = {
        "replicas": len(results),
        "pair_cohabit_proxy": float(np.mean([p for _, _, p in results])),
        "snapshot_times": times,
    }
    _write_json(os.path.join(out, "summary.json"), summary, cfg)
    return EXIT_PASS


def consistency_report(cfg: dict, include_simulation: bool) -> dict:
    """Cross-module gaps on a shared monodisperse experiment."""
    times = [float(t) for t in cfg["snapshot_times"]]
    T = max(times) + 0.5
    ocfg = cfg["ode"]
    solver = ffode.SolverConfig(K=int(ocfg["K"]), dt=float(ocfg["dt"]))
    v_traj = ffode.solve("ForestFire", ffode.monodisperse(solver.K), T,
                         solver)
    a_traj = agepde.evolve(dirac(0.0), T, float(cfg["agepde"]["dt"]))
    gf = GenFn(dirac(0.0))
    ds = float(cfg["charcurve"]["ds"])
    tol = cfg["tolerances"]
    gaps: dict = {}
    for t in times:
        pi_age = a_traj.measure_at(t)
        sol = charcurves.solve_backward(None, t, ds, v_traj=v_traj)
        pi_char = charcurves.reconstruct_pi(dirac(0.0), sol, gf).measure
        gaps["levy_age_char_t%g" % t] = \
            float(levy_distance(pi_age, pi_char))
    if include_simulation:
        results, _ = _run_replicas(cfg)
        n = int(cfg["simulate"]["n"])
        for i, t in enumerate(times):
            pooled_ages = np.concatenate([snaps[i][1]
                                          for snaps, _, _ in results])
            pi_n = empirical_measure(pooled_ages)
            gaps["levy_sim_age_t%g" % t] = \
                float(levy_distance(pi_n, a_traj.measure_at(t)))
            v_n = np.mean([snaps[i][2] for snaps, _, _ in results],
                          axis=0)
            v_ode = v_traj.state_at(t).export_v()[:50]
            gaps["l1_v_t%g" % t] = float(np.abs(v_n[:50] - v_ode).sum())
        t1, t2 = times[0], times[-1]
        flux = np.mean([np.asarray(b[1])[(np.asarray(b[0]) > t1)
                                         & (np.asarray(b[0]) <= t2)].sum()
                        for _, b, _ in results]) / n
        target = a_traj.phi_integral(t1, t2)
        gaps["burn_flux_%g_%g" % (t1, t2)] = float(abs(flux - target))
    checks = {}
    for name, val in gaps.items():
        if name.startswith("levy_age_char"):
            bound = float(tol["levy_age_char"])
        elif name.startswith("levy_sim_age"):
            bound = float(tol["levy_sim_age"])
        elif name.startswith("l1_v"):
            bound = float(tol["l1_v"])
        else:
            bound = float(tol["burn_flux"])
        checks[name] = {"value": val, "tolerance": bound,
                        "pass": bool(val <= bound)}
    if not include_simulation:
        for name in ("levy_sim_age", "l1_v", "burn_flux"):
            checks[name] = {"value": None, "tolerance": None,
                            "pass": None, "status": "skipped"}
    report = {
        "snapshot_times": times,
        "checks": checks,
        "all_pass": all(c["pass"] for c in checks.values()
                        if c["pass"] is not None),
    }
    return report


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mfff",
        description="mean-field forest fire experiments")
    ap.add_argument("command",
                    choices=["spectral", "tree", "ode", "charcurve",
                             "agepde", "simulate", "consistency-loop"])
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--snapshot-times", default=None)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else 0
    try:
        raw_cfg = load_config(args.config)
        cfg = resolve_config(args)
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    out = str(cfg["out"])
    os.makedirs(out, exist_ok=True)
    try:
        if args.command == "spectral":
            return cmd_spectral(cfg, out)
        if args.command == "tree":
            return cmd_tree(cfg, out)
        if args.command == "ode":
            return cmd_ode(cfg, out)
        if args.command == "charcurve":
            return cmd_charcurve(cfg, out)
        if args.command == "agepde":
            return cmd_agepde(cfg, out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "consistency-loop":
            include_sim = ("simulate" in raw_cfg) or (args.config is None)
            report = consistency_report(cfg, include_sim)
            _write_json(os.path.join(out, "consistency_report.json"),
                        report, cfg)
            return EXIT_PASS if report["all_pass"] else EXIT_TOLERANCE
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as e:
        print("numerical failure: %s" % e, file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
