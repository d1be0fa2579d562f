"""Paired trajectories driven by one Brownian path, and the terms of the difference balance.

Two solutions theta^1, theta^2 start epsilon0 apart (in the Hdot^{-beta/2} norm) and
share every noise increment.  For the difference theta = theta^1 - theta^2,

    d <theta, G theta> = (2 I1 + 2 I2 + J) dt + martingale,
    I1 = <grad G theta, (K theta^1) theta>,   I2 = <grad G theta, (K theta) theta^2>,

with J the trace quadratic form of theta.  With identical data a deterministic
stepper gives identical paths, so uniqueness itself is vacuous numerically; what is
measured is how small perturbations grow, through D(t) = |theta|^2_{Hdot^{-beta/2}}.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .certificates import CertificateReport, quadratic_form
from .errors import ConfigurationError, DomainError, ParameterRangeWarning
from .lattice import SpectralScalarField
from .solver import _Operators, prepare_initial_data, run, truncate

PERTURBATIONS = ("smooth_bump", "high_mode", "white_band")
DIFFERENCE_COLUMNS = ("pair", "time", "D", "H_diff", "I1", "I2", "J")


def sobolev_shift(alpha, beta, p):
    """Shift epsilon = (beta/2 - 1/min(p, 2) - alpha) / 2 used in the I1 bound."""
    return 0.5 * (beta / 2 - 1 / min(p, 2.0) - alpha)


def uniqueness_range_violations(alpha, beta, p):
    out = []
    if not 0 < alpha < 0.5:
        out.append(f"alpha={alpha} outside (0, 1/2)")
    if not 1.5 < beta < 2:
        out.append(f"beta={beta} outside (3/2, 2)")
    if not p > 3 / beta:
        out.append(f"p={p} not above 3/beta = {3 / beta:.4g}")
    q = min(p, 2.0)
    if not 2 / q - beta / 2 < alpha < beta / 2 - 1 / q:
        out.append(f"alpha={alpha} outside ({2 / q - beta / 2:.4g}, {beta / 2 - 1 / q:.4g})")
    return out


def perturbation(kind, lattice, beta, delta, seed=0):
    """Mean-zero perturbation with unit Hdot^{-beta/2} norm, supported in the resolved band."""
    x, y = lattice.grid
    L = lattice.box_length
    if kind == "smooth_bump":
        w = 0.1 * L
        vals = np.exp(-((x - 0.3 * L) ** 2 + (y - 0.6 * L) ** 2) / w**2)
        f = SpectralScalarField.from_physical(vals - vals.mean(), lattice)
    elif kind == "high_mode":
        k = max(1, int(2 * lattice.dealias_cutoff / 3))
        f = SpectralScalarField.from_physical(np.cos(2 * np.pi * k * x / L), lattice)
    elif kind == "white_band":
        rng = np.random.default_rng(seed)
        f = SpectralScalarField.from_physical(rng.standard_normal((lattice.n, lattice.n)), lattice)
    else:
        raise ConfigurationError(f"unknown perturbation {kind!r}; expected one of {PERTURBATIONS}")
    f = truncate(f, delta)
    norm = f.norm("homogeneous", -beta / 2)
    if norm == 0:
        raise ConfigurationError(f"perturbation {kind!r} has no modes in the resolved band")
    return f * (1.0 / norm)


class _Terms:
    """Batched I1, I2, J, D and H-norms for half-layout pairs."""

    def __init__(self, ops):
        self.ops = ops
        lat = ops.lattice
        h = ops.half
        xi = ops.rxi
        self.grad_green = 2j * np.pi * xi * ops.green[None]
        self.vel_exact = ops.kernels.velocity_exact[:, :, :h]
        self.dA = lat.dx**2

    def evaluate(self, c1, c2):
        ops = self.ops
        lat = ops.lattice
        d = c1 - c2
        g = lat.rbackward(self.grad_green[None] * d[:, None])
        u1 = lat.rbackward(self.vel_exact[None] * c1[:, None])
        ud = lat.rbackward(self.vel_exact[None] * d[:, None])
        th = lat.rbackward(d)
        th2 = lat.rbackward(c2)
        # band-limited factors in the 2/3 band: grid sums of triple products are exact
        i1 = np.sum(np.sum(g * u1, axis=1) * th, axis=(-2, -1)) * self.dA
        i2 = np.sum(np.sum(g * ud, axis=1) * th2, axis=(-2, -1)) * self.dA
        return {
            "D": ops.spectral_sum(ops.w_hdot, d),
            "H_diff": ops.spectral_sum(ops.w_gain, d),
            "I1": i1,
            "I2": i2,
            "J": ops.spectral_sum(ops.trace, d),
        }


@dataclass
class DifferenceLedger:
    times: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    def append(self, time, values):
        self.times.append(float(time))
        self.rows.append(values)

    def column(self, name):
        """Array (pairs, records)."""
        return np.stack([r[name] for r in self.rows], axis=1)

    def to_csv(self, path):
        cols = {c: self.column(c) for c in DIFFERENCE_COLUMNS[2:]}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DIFFERENCE_COLUMNS)
            for i in range(cols["D"].shape[0]):
                for j, t in enumerate(self.times):
                    w.writerow([i, repr(t)] + [repr(float(cols[c][i, j])) for c in DIFFERENCE_COLUMNS[2:]])


@dataclass
class PairedRun:
    """Ensemble of pairs; pair i uses noise stream i for both members."""

    config: object
    epsilon0: float
    perturbation_mode: str
    noise_seed: int
    ledger: DifferenceLedger
    result: object
    snapshots: dict
    digests_match: bool

    @property
    def pairs(self):
        return self.result.ledger.realizations // 2

    def snapshot(self, time, pair=0):
        """(theta1, theta2) as SpectralScalarFields at a stored time."""
        lat = self.config.lattice
        for t, (a, b) in self.snapshots.items():
            if abs(t - time) <= 0.5 * self.config.dt:
                return SpectralScalarField(lat, a[pair]), SpectralScalarField(lat, b[pair])
        raise DomainError(f"no snapshot at t = {time}; stored: {sorted(self.snapshots)}")


def paired_run(config, epsilon0, perturbation_mode="smooth_bump", pairs=None, theta0=None,
               snapshot_every=None, perturbation_seed=0):
    """Evolve ``pairs`` pairs (default ``config.ensemble_size``) in lockstep on one worker."""
    for msg in uniqueness_range_violations(config.alpha, config.beta, config.p):
        warnings.warn(msg, ParameterRangeWarning, stacklevel=2)
    if epsilon0 < 0:
        raise ConfigurationError(f"epsilon0 must be nonnegative, got {epsilon0}")
    pairs = config.ensemble_size if pairs is None else int(pairs)
    lat = config.lattice
    base = theta0 if theta0 is not None else prepare_initial_data(config.initial, config.delta, lat)
    pert = perturbation(perturbation_mode, lat, config.beta, config.delta, perturbation_seed)
    other = base + pert * epsilon0
    fields = [f for _ in range(pairs) for f in (base, other)]
    noise_map = [i for i in range(pairs) for _ in range(2)]
    ops = _Operators(config)
    terms = _Terms(ops)
    ledger = DifferenceLedger()
    every = snapshot_every if snapshot_every is not None else max(1, config.steps // 10)
    snaps = {}

    def observe(k, theta_h):
        c1, c2 = theta_h[0::2], theta_h[1::2]
        ledger.append(k * config.dt, terms.evaluate(c1, c2))
        if k % every == 0 or k == config.steps:
            snaps[k * config.dt] = (np.stack([lat.to_full(c) for c in c1]),
                                    np.stack([lat.to_full(c) for c in c2]))

    result = run(config, fields, observer=observe, noise_map=noise_map)
    dig = result.increments_digest
    match = all(dig[2 * i] == dig[2 * i + 1] for i in range(pairs)) if dig else True
    if not match:
        raise AssertionError("paired members consumed different noise increments")
    return PairedRun(config, float(epsilon0), perturbation_mode, config.seed, ledger, result, snaps, match)


def noise_ablation(config, epsilon0, perturbation_mode="smooth_bump", **kw):
    """Paired runs with and without noise from the same data: (with_noise, without_noise)."""
    return (paired_run(config.replace(noise_on=True), epsilon0, perturbation_mode, **kw),
            paired_run(config.replace(noise_on=False), epsilon0, perturbation_mode, **kw))


def _growth_constant(t, ed, d0):
    pos = t > 0
    return float(np.max(np.log(ed[pos] / d0) / t[pos]))


def gronwall_fit(run_, refined=None, stability=2.0, min_pairs=16):
    """Smallest C with E D(t) <= D(0) e^{Ct}, and the dissipation ledger constant c.

    c_fit is the largest c with E D(t) - D(0) + c int E H - C+ int E D <= 0 at every
    recorded t, where H is the Hdot^{-beta/2+1-alpha} type norm of the difference and
    C+ = max(C, 0).  PASS iff c_fit > 0 and, given a ``refined`` (dt/2) run, the two
    C values agree within ``stability`` (or both are below the Monte Carlo floor).
    """
    cfg = run_.config
    if run_.pairs < min_pairs:
        raise ConfigurationError(f"Grönwall fit needs at least {min_pairs} pairs, got {run_.pairs}")

    def fit(r):
        t = np.array(r.ledger.times)
        D = r.ledger.column("D")
        H = r.ledger.column("H_diff")
        ed, eh = D.mean(axis=0), H.mean(axis=0)
        d0 = ed[0]
        if d0 == 0 and np.all(ed == 0):
            return None
        dt = r.config.dt
        C = _growth_constant(t, ed, d0)
        int_d = np.concatenate([[0.0], np.cumsum(ed[:-1]) * dt])
        int_h = np.concatenate([[0.0], np.cumsum(eh[:-1]) * dt])
        pos = t > 0
        c_fit = float(np.min((max(C, 0.0) * int_d[pos] - (ed[pos] - d0)) / int_h[pos]))
        # spread of the growth rate across pairs sets the resolution of C
        per_pair = [_growth_constant(t, D[i], D[i, 0]) for i in range(D.shape[0])]
        floor = 2 * float(np.std(per_pair, ddof=1)) / np.sqrt(D.shape[0])
        return {"C": C, "c": c_fit, "floor": floor, "t": t, "ED": ed, "EH": eh}

    main = fit(run_)
    if main is None:
        return CertificateReport(
            name="gronwall", passed=True, constants={"C": 0.0, "c": 0.0},
            metadata={"pairs": run_.pairs}, warning="trivially unique at this resolution")
    checks = {"c_positive": main["c"] > 0, "C_finite": bool(np.isfinite(main["C"]))}
    consts = {"C": main["C"], "c": main["c"], "C_floor": main["floor"], "D0": float(main["ED"][0])}
    warning = ""
    if refined is not None:
        ref = fit(refined)
        consts.update({"C_refined": ref["C"], "c_refined": ref["c"]})
        a, b = abs(main["C"]), abs(ref["C"])
        big, small = max(a, b), min(a, b)
        within_floor = abs(main["C"] - ref["C"]) <= max(main["floor"], ref["floor"])
        checks["C_stable_under_dt_halving"] = bool(within_floor or (small > 0 and big / small <= stability))
    else:
        warning = "no refined run: dt stability not checked"
    passed = all(checks.values())
    witness = None
    if not passed:
        witness = {k: v for k, v in consts.items()}
    return CertificateReport(
        name="gronwall", passed=passed, constants=consts, checks=checks,
        tolerances={"stability": stability},
        metadata={"pairs": run_.pairs, "dt": cfg.dt, "t_end": cfg.t_end, "alpha": cfg.alpha,
                  "beta": cfg.beta, "p": cfg.p, "epsilon0": run_.epsilon0,
                  "perturbation": run_.perturbation_mode},
        witness=witness, warning=warning,
        table={"time": main["t"], "ED": main["ED"], "EH": main["EH"]},
    )


def i_terms(theta1, theta2, config):
    """(I1, I2, J) for one pair of fields with the operators of ``config``."""
    ops = _Operators(config)
    lat = ops.lattice
    c1 = lat.to_half(theta1.coeffs)[None]
    c2 = lat.to_half(theta2.coeffs)[None]
    v = _Terms(ops).evaluate(c1, c2)
    return float(v["I1"][0]), float(v["I2"][0]), float(v["J"][0])


def i_terms_probe(run_, at_time, pair=0):
    th1, th2 = run_.snapshot(at_time, pair)
    return i_terms(th1, th2, run_.config)


def i2_exact(theta, theta2, kernels):
    """<grad G theta, (K theta) theta^2> with the exact kernel in both places."""
    lat = theta.lattice
    xi = lat.xi
    c = theta.coeffs
    g = np.stack([lat.backward(2j * np.pi * xi[i] * kernels.green_exact * c).real for i in range(2)])
    u = np.stack([lat.backward(kernels.velocity_exact[i] * c).real for i in range(2)])
    return float(np.sum(np.sum(g * u, axis=0) * theta2.to_physical()) * lat.dx**2)


def lp_norm(theta, p):
    vals = theta.to_physical()
    return float((np.sum(np.abs(vals) ** p) * theta.lattice.dx**2) ** (1 / p))


def i1_bound_sweep(config, count=100, seed=0, bands=((0.5, 4.0),)):
    """Fit one C with |I1| <= C |theta1|_{L^pt} |theta|^2_{Hdot^{-b/2+1-a-eps}} over random triples.

    Returns (C, ratios, pt, eps).
    """
    from .solver import _random_band

    lat = config.lattice
    eps = sobolev_shift(config.alpha, config.beta, config.p)
    pt = 1.0 / (config.beta / 2 - config.alpha - eps)
    s = -config.beta / 2 + 1 - config.alpha - eps
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(count):
        seeds = rng.integers(0, 2**31, size=3)
        t1 = truncate(_random_band(lat, {"seed": int(seeds[0]), "bands": list(bands)}), config.delta)
        t2 = truncate(_random_band(lat, {"seed": int(seeds[1]), "bands": list(bands)}), config.delta)
        i1, _, _ = i_terms(t1, t2, config)
        theta = t1 - t2
        bound = lp_norm(t1, pt) * theta.norm("homogeneous", s) ** 2
        ratios.append(abs(i1) / bound)
    ratios = np.array(ratios)
    return float(ratios.max()), ratios, pt, eps


def difference_quadratic_form(theta, config):
    """J through the certificate quadratic form (same symbol as the solver ledger)."""
    ops = _Operators(config)
    symbol = ops.lattice.to_full(ops.trace).real
    return quadratic_form(symbol, theta)
