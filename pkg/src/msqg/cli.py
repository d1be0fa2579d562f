"""Command line entry point: ``msqg {simulate, certify, uniqueness, kernels-scan}``.

Configs are INI-style text with one section per module.  Values are JSON literals
(numbers, true/false, lists, objects); bare words are read as strings.  Unknown
sections or keys are errors.  A preset supplies defaults that the file overrides.

Exit status: 0 success, 1 certificate FAIL, 2 configuration error, 3 numeric error.
"""

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import certificates as cert
from .covariance import CovarianceModel
from .errors import ConfigurationError, MSQGError, NumericError, ParameterRangeWarning
from .kernels import (KernelSet, green_reg_fourier_route, green_reg_time_route,
                      heat_kernel_bounds_scan, kernel_error_stability)
from .lattice import Lattice, write_msqg
from .solver import SolverConfig, ensemble, prepare_initial_data, run
from .uniqueness import gronwall_fit, paired_run

log = logging.getLogger("msqg")

COMMANDS = ("simulate", "certify", "uniqueness", "kernels-scan")
CERTIFICATES = ("A_bound", "remainders", "noise_multiplier", "energy_balance", "regularity_budget")

_RANDOM_BAND = {"kind": "random_band", "seed": 3, "bands": [[0.1, 0.5]]}

SCHEMA = {
    "run": {"workers": 1, "seed": 0},
    "solver": {},  # SolverConfig fields
    "certify": {
        "certificates": list(CERTIFICATES),
        "alpha": 0.4, "beta": 1.6, "delta": 0.05, "n": 512, "box_length": 4.0,
        "exponent_tol_A": 0.15, "exponent_tol": 0.2,
        "delta_ladder": [0.2, 0.1, 0.05],
        "noise_alpha": 0.3, "noise_delta": 0.01, "noise_n": 512, "noise_box_length": 4.0,
        "identity_rtol": 1e-8, "stability": 2.0,
        "balance_times": [0.05, 0.1, 0.2], "budget_deltas": [0.2, 0.1, 0.05],
    },
    "uniqueness": {"epsilon0": 1e-3, "perturbation": "smooth_bump", "pairs": 16, "refine": True,
                   "stability": 2.0},
    "kernels": {"betas": [1.2, 1.5, 1.8], "dimension": 2, "t_range": [0.01, 1.0], "r_range": [0.1, 10.0],
                "points": 9, "green_betas": [1.3, 1.7], "green_deltas": [0.1, 0.01],
                "green_radii": [0.05, 0.1, 0.3, 1.0, 3.0], "green_rtol": 1e-6},
}

_SOLVER_DESK = {"n": 64, "box_length": 20.0, "alpha": 0.3, "beta": 1.7, "delta": 0.1, "p": 1.8,
                "dt": 2e-4, "t_end": 0.2, "ensemble_size": 64, "initial": _RANDOM_BAND}

PRESETS = {
    "smoke": {
        "solver": {"n": 32, "box_length": 20.0, "alpha": 0.3, "beta": 1.7, "delta": 0.1, "p": 1.8,
                   "dt": 4e-4, "t_end": 0.1, "ensemble_size": 32, "initial": _RANDOM_BAND},
        "certify": {"certificates": ["A_bound", "noise_multiplier", "energy_balance"],
                    "n": 64, "box_length": 1.0, "noise_n": 64, "noise_box_length": 1.0,
                    "balance_times": [0.05, 0.1]},
        "uniqueness": {"pairs": 16},
    },
    "desk": {
        "solver": _SOLVER_DESK,
        "certify": {},
        "uniqueness": {},
    },
    "full": {
        "solver": dict(_SOLVER_DESK, n=128, box_length=40.0),
        "certify": {"n": 1024, "box_length": 8.0, "noise_n": 1024, "noise_box_length": 8.0},
        "uniqueness": {"pairs": 32},
    },
}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip()


def load_config(path, preset=None):
    """Merge preset defaults, SCHEMA defaults and the file; returns {section: {key: value}}."""
    cfg = {sec: dict(vals) for sec, vals in SCHEMA.items()}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        for sec, vals in PRESETS[preset].items():
            cfg[sec].update(json.loads(json.dumps(vals)))
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(p)
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse {p}: {exc}") from exc
        solver_keys = set(SolverConfig.__dataclass_fields__)
        for sec in parser.sections():
            if sec not in cfg:
                raise ConfigurationError(f"{p}: unknown section [{sec}]")
            for key, raw in parser.items(sec):
                allowed = solver_keys if sec == "solver" else set(SCHEMA[sec])
                if key not in allowed:
                    raise ConfigurationError(f"{p}: unknown key {key!r} in [{sec}]")
                cfg[sec][key] = _parse_value(raw)
    return cfg


def _solver_config(cfg, seed=None, **overrides):
    d = dict(cfg["solver"])
    d["seed"] = int(seed if seed is not None else cfg["run"].get("seed", 0))
    d.update(overrides)
    return SolverConfig.from_dict(d)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Output:
    """Collects artifacts inside one directory; writes the manifest and checksum index."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []
        self.timings = {}

    def path(self, name):
        p = self.root / name
        self.files.append(name)
        return p

    def json(self, name, data):
        with open(self.path(name), "w") as fh:
            json.dump(cert._jsonable(data), fh, indent=2, sort_keys=True)

    def finish(self, manifest):
        index = self.root / "checksums.sha256"
        with open(index, "w") as fh:
            for name in sorted(set(self.files)):
                fh.write(f"{_sha256(self.root / name)}  {name}\n")
        manifest = dict(manifest, artifacts=sorted(set(self.files)), timings=self.timings,
                        checksum_index=index.name)
        with open(self.root / "manifest.json", "w") as fh:
            json.dump(cert._jsonable(manifest), fh, indent=2, sort_keys=True)


def _timed(out, label, fn, *a, **kw):
    t0 = time.perf_counter()
    try:
        return fn(*a, **kw)
    finally:
        out.timings[label] = time.perf_counter() - t0


# --- commands -----------------------------------------------------------------------------------

def cmd_simulate(cfg, out, seed, workers):
    config = _solver_config(cfg, seed)
    res = _timed(out, "ensemble", ensemble, config, None, workers)
    res.ledger.to_csv(out.path("ledger.csv"))
    for i, c in enumerate(res.final):
        write_msqg(out.path(f"final_{i:04d}.msqg"), c, config.box_length)
    summary = {"config": config.to_dict(), "completed": res.completed,
               "error": str(res.error) if res.error else None,
               "l2_mean_drift": res.ledger.l2_mean_drift(),
               "lp_deviation_max": float(np.max(res.ledger.lp_deviation())),
               "increments_digest": res.increments_digest}
    out.json("summary.json", summary)
    if res.error is not None:
        raise res.error
    return 0


def _cert_jobs(cfg, seed):
    c = cfg["certify"]
    jobs = {}
    want = c["certificates"]
    unknown = set(want) - set(CERTIFICATES)
    if unknown:
        raise ConfigurationError(f"unknown certificates {sorted(unknown)}")

    def decomposition(delta):
        lat = Lattice(int(c["n"]), float(c["box_length"]))
        cov = CovarianceModel(c["alpha"], delta, lat)
        return cert.decompose_trace_symbol(cov, KernelSet(c["beta"], delta, lat), sample=False)

    if "A_bound" in want:
        jobs["A_bound"] = lambda: cert.certify_A_bound(decomposition(c["delta"]),
                                                       exponent_tol=c["exponent_tol_A"])
    if "remainders" in want:
        jobs["remainders"] = lambda: cert.certify_remainders(
            decomposition(min(c["delta_ladder"])), c["delta_ladder"],
            exponent_tol=c["exponent_tol"], stability=c["stability"])
    if "noise_multiplier" in want:
        def noise():
            lat = Lattice(int(c["noise_n"]), float(c["noise_box_length"]))
            cov = CovarianceModel(c["noise_alpha"], c["noise_delta"], lat)
            band = prepare_initial_data({"kind": "random_band", "seed": seed, "bands": [[0.5, 3.0]]},
                                        c["noise_delta"], lat)
            return cert.certify_noise_multiplier(cov, [band], exponent_tol=c["exponent_tol"],
                                                 identity_rtol=c["identity_rtol"])
        jobs["noise_multiplier"] = noise
    if "energy_balance" in want or "regularity_budget" in want:
        config = _solver_config(cfg, seed)

        def coupled(conf):
            # the dt run draws two unit increments per step so that it shares the dt/2 path
            coarse = run(conf.replace(noise_substeps=2))
            fine = run(conf.replace(dt=conf.dt / 2, noise_substeps=1))
            return coarse, fine

        if "energy_balance" in want:
            jobs["energy_balance"] = lambda: cert.energy_balance(*coupled(config), times=c["balance_times"])
        if "regularity_budget" in want:
            jobs["regularity_budget"] = lambda: cert.regularity_budget(
                {d: run(config.replace(delta=d)) for d in c["budget_deltas"]}, stability=c["stability"])
    return jobs


def cmd_certify(cfg, out, seed, workers):
    jobs = _cert_jobs(cfg, seed)

    def execute(item):
        name, fn = item
        return name, _timed(out, name, fn)

    with ThreadPoolExecutor(max(1, workers)) as pool:
        reports = dict(pool.map(execute, jobs.items()))
    status = {}
    for name in sorted(reports):
        rep = reports[name]
        rep.to_json(out.path(f"{name}.json"))
        if rep.table:
            rep.to_csv(out.path(f"{name}.csv"))
        status[name] = rep.status
        print(f"{name}: {rep.status}")
    out.json("certificates.json", status)
    return 0 if all(s != "FAIL" for s in status.values()) else 1


def cmd_uniqueness(cfg, out, seed, workers):
    u = cfg["uniqueness"]
    config = _solver_config(cfg, seed)
    pairs = int(u["pairs"])
    main = _timed(out, "pairs", paired_run, config, u["epsilon0"], u["perturbation"], pairs)
    main.ledger.to_csv(out.path("difference.csv"))
    refined = None
    if u["refine"]:
        refined = _timed(out, "pairs_refined", paired_run, config.replace(dt=config.dt / 2),
                         u["epsilon0"], u["perturbation"], pairs)
        refined.ledger.to_csv(out.path("difference_refined.csv"))
    rep = gronwall_fit(main, refined, stability=u["stability"])
    rep.to_json(out.path("gronwall.json"))
    print(f"gronwall: {rep.status}")
    return 0 if rep.passed else 1


def cmd_kernels_scan(cfg, out, seed, workers):
    k = cfg["kernels"]
    t_grid = np.geomspace(*k["t_range"], int(k["points"]))
    r_grid = np.geomspace(*k["r_range"], int(k["points"]))
    rows, ok = [], True
    for beta in k["betas"]:
        probe = _timed(out, f"heat_{beta}", heat_kernel_bounds_scan, beta, int(k["dimension"]), t_grid, r_grid)
        rows.append({"beta": beta, "band": probe.band, "refined_band": probe.refined_band,
                     "C": probe.C, "passed": probe.passed})
        ok = ok and probe.passed
    out.json("heat_kernel_bounds.json", rows)
    agreement = []
    radii = np.asarray(k["green_radii"], float)
    for beta in k["green_betas"]:
        for delta in k["green_deltas"]:
            a = green_reg_fourier_route(radii, beta, delta)
            b = green_reg_time_route(radii, beta, delta)
            err = float(np.max(np.abs(a - b) / np.abs(b)))
            agreement.append({"beta": beta, "delta": delta, "max_rel_error": err,
                              "passed": err <= k["green_rtol"]})
            ok = ok and err <= k["green_rtol"]
    out.json("green_routes.json", agreement)
    stab = []
    for beta in k["green_betas"]:
        passed, reports, growth = kernel_error_stability(beta, sorted(k["green_deltas"], reverse=True))
        for rep in reports:
            rep.to_csv(out.path(f"kernel_errors_b{beta}_d{rep.delta}.csv"))
        stab.append({"beta": beta, "passed": passed, "growth": {f"{q}/{r}": g for (q, r), g in growth.items()}})
    out.json("kernel_error_stability.json", stab)
    print(f"kernels-scan: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


HANDLERS = {"simulate": cmd_simulate, "certify": cmd_certify, "uniqueness": cmd_uniqueness,
            "kernels-scan": cmd_kernels_scan}


def build_parser():
    parser = argparse.ArgumentParser(prog="msqg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI-style config file")
        p.add_argument("--out", type=Path, default=Path("msqg-out") / name, help="output directory")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--workers", type=int, help="worker threads (fallback: MSQG_WORKERS)")
        p.add_argument("--preset", choices=sorted(PRESETS), help="default parameter set")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _workers(args, cfg):
    if args.workers is not None:
        return args.workers
    env = os.environ.get("MSQG_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigurationError(f"MSQG_WORKERS={env!r} is not an integer") from exc
    return int(cfg["run"].get("workers", 1))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config, args.preset)
        seed = args.seed if args.seed is not None else int(cfg["run"].get("seed", 0))
        if not 0 <= seed < 2**64:
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {seed}")
        workers = _workers(args, cfg)
        if workers < 1:
            raise ConfigurationError(f"workers must be positive, got {workers}")
        out = _Output(args.out)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ParameterRangeWarning)
            code = HANDLERS[args.command](cfg, out, seed, workers)
    except ConfigurationError as exc:
        print(f"msqg: configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"msqg: numeric error: {exc}", file=sys.stderr)
        code = 3
        out = locals().get("out")
        if out is None:
            return code
    except MSQGError as exc:
        print(f"msqg: error: {exc}", file=sys.stderr)
        return 2
    out.finish({"command": args.command, "config": str(args.config) if args.config else None,
                "preset": args.preset, "output": str(out.root), "seed": seed, "workers": workers,
                "version": __version__, "resolved_config": cfg, "exit_status": code,
                "wall_clock": time.perf_counter() - t0})
    return code


if __name__ == "__main__":
    sys.exit(main())
