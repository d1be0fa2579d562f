"""Pseudo-spectral Euler-Maruyama integrator for the regularized stochastic equation.

The state is carried in the half-spectrum (real FFT) layout with a leading
realization axis, so a whole ensemble advances with one batched transform per
field.  One step reads

    theta <- E(dt) [theta - dt div(u theta) - div(theta dW)],

where u is the regularized velocity, dW the transport-noise increment, products are
dealiased with the 2/3 rule and E(dt) = exp(-m dt / 2) is the exact factor of the
Ito correction.
"""

import csv
import hashlib
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .certificates import trace_symbol
from .covariance import CovarianceModel, NoiseSampler, ito_multiplier, stream_seed
from .errors import (ConfigurationError, DataError, DomainError, NumericError,
                     ParameterRangeWarning, StepRejected)
from .kernels import KernelSet
from .lattice import Lattice, SpectralScalarField, load_field, transform

log = logging.getLogger(__name__)

LEDGER_COLUMNS = ("step", "time", "l1", "l2", "lp", "hdot_neg", "h_gain", "quad_form", "trace_term")


def wellposedness_range_violations(alpha, beta, p):
    """Messages for each violated well-posedness range condition (empty if none)."""
    out = []
    if not 1 - beta / 2 < alpha < beta / 2:
        out.append(f"alpha={alpha} outside (1 - beta/2, beta/2) = ({1 - beta / 2}, {beta / 2})")
    p_lo = max(2 / (1 + beta / 2 - alpha), 4 / (beta + 1))
    if not p_lo < p <= 2:
        out.append(f"p={p} outside ({p_lo:.4g}, 2]")
    return out


@dataclass(frozen=True)
class SolverConfig:
    """Everything that determines a run.

    ``nonlinear``, ``diffusion_on`` and ``drift_mode`` are diagnostic switches.
    ``drift_mode = (k1, k2, amplitude)`` adds the steady shear flow
    amplitude * (k2, -k1)/|k| * cos(2 pi k.x / L) to the velocity.
    ``noise_substeps = s`` builds each increment from s unit draws (summed and scaled
    by 1/sqrt(s)), which couples runs at dt and dt/s to the same Brownian path.
    """

    n: int = 64
    box_length: float = 1.0
    alpha: float = 0.3
    beta: float = 1.7
    delta: float = 0.1
    p: float = 1.8
    dt: float = 1e-3
    t_end: float = 0.1
    cfl_safety: float = 0.5
    seed: int = 0
    ensemble_size: int = 1
    noise_on: bool = True
    nonlinear: bool = True
    diffusion_on: bool = True
    ito_correction: str = "galerkin"
    noise_substeps: int = 1
    drift_mode: tuple = None
    initial: dict = field(default_factory=lambda: {"kind": "random_band"})

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if not self.t_end >= self.dt:
            raise ConfigurationError(f"t_end={self.t_end} must be at least dt={self.dt}")
        if not 0 < self.cfl_safety <= 1:
            raise ConfigurationError(f"cfl_safety must lie in (0, 1], got {self.cfl_safety}")
        if int(self.ensemble_size) != self.ensemble_size or self.ensemble_size < 1:
            raise ConfigurationError(f"ensemble_size must be a positive integer, got {self.ensemble_size}")
        if int(self.noise_substeps) != self.noise_substeps or self.noise_substeps < 1:
            raise ConfigurationError(f"noise_substeps must be a positive integer, got {self.noise_substeps}")
        if self.ito_correction not in ("galerkin", "laplacian"):
            raise ConfigurationError(f"unknown ito_correction {self.ito_correction!r}")
        if not self.p >= 1:
            raise ConfigurationError(f"p must be at least 1, got {self.p}")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be nonnegative, got {self.seed}")
        Lattice(self.n, self.box_length)
        for msg in wellposedness_range_violations(self.alpha, self.beta, self.p):
            warnings.warn(msg, ParameterRangeWarning, stacklevel=3)

    @property
    def lattice(self):
        return Lattice(self.n, self.box_length)

    @property
    def steps(self):
        return int(round(self.t_end / self.dt))

    def replace(self, **changes):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ParameterRangeWarning)
            return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        d["drift_mode"] = list(self.drift_mode) if self.drift_mode is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown solver keys: {sorted(extra)}")
        d = dict(d)
        if d.get("drift_mode") is not None:
            d["drift_mode"] = tuple(d["drift_mode"])
        return cls(**d)


# --- initial data -------------------------------------------------------------------------

def _random_band(lattice, spec):
    rng = np.random.default_rng(spec.get("seed", 0))
    bands = spec.get("bands", [(1.0, 4.0)])
    r = lattice.xi_abs
    keep = np.zeros(r.shape, dtype=bool)
    for lo, hi in bands:
        keep |= (r >= lo) & (r <= hi)
    noise = lattice.forward(rng.standard_normal((lattice.n, lattice.n)))
    # spectral slope keeps every band visible in negative norms
    slope = spec.get("slope", 0.0)
    rs = np.where(r == 0, 1.0, r)
    coeffs = np.where(keep, noise * rs**slope, 0.0)
    coeffs[0, 0] = 0.0
    field = SpectralScalarField(lattice, coeffs)
    amp = spec.get("amplitude", 1.0)
    norm = field.norm("inhomogeneous", 0.0) / lattice.box_length
    if norm == 0:
        raise ConfigurationError(f"random_band bands {bands} contain no lattice modes")
    return field * (amp / norm)


_ANALYTIC = {
    "cosines": lambda x, y, L: np.cos(2 * np.pi * x / L) + 0.5 * np.sin(2 * np.pi * (x + 2 * y) / L),
    "gaussian_dipole": lambda x, y, L: (
        np.exp(-((x - 0.4 * L) ** 2 + (y - 0.5 * L) ** 2) / (0.05 * L) ** 2)
        - np.exp(-((x - 0.6 * L) ** 2 + (y - 0.5 * L) ** 2) / (0.05 * L) ** 2)
    ),
    "gaussian_bump": lambda x, y, L: np.exp(-((x - 0.5 * L) ** 2 + (y - 0.5 * L) ** 2) / (0.1 * L) ** 2),
}


def _analytic(lattice, spec):
    expr = spec.get("profile", "cosines")
    func = _ANALYTIC.get(expr) if isinstance(expr, str) else expr
    if func is None:
        raise ConfigurationError(f"unknown analytic profile {expr!r}; choose from {sorted(_ANALYTIC)}")
    x, y = lattice.grid
    values = spec.get("amplitude", 1.0) * func(x, y, lattice.box_length)
    field = transform(values, lattice)
    scale = max(np.max(np.abs(values)), 1e-300)
    if abs(field.mean) > 1e-10 * scale:
        raise DomainError(f"analytic profile {expr!r} has mean {field.mean:.3e}; need mean zero")
    return SpectralScalarField(lattice, np.where(lattice.xi_abs == 0, 0.0, field.coeffs))


def initial_target(spec, lattice):
    """The untruncated datum theta_0 on the lattice."""
    kind = spec.get("kind")
    if kind == "random_band":
        return _random_band(lattice, spec)
    if kind == "analytic":
        return _analytic(lattice, spec)
    if kind == "file":
        try:
            field = load_field(spec["path"])
        except (OSError, KeyError) as exc:
            raise DataError(f"cannot load initial field: {exc}") from exc
        if field.lattice != lattice:
            raise ConfigurationError(f"initial field lives on {field.lattice}, run uses {lattice}")
        scale = max(np.max(np.abs(field.coeffs)), 1e-300)
        if abs(field.coeffs[0, 0]) > 1e-12 * scale:
            raise DomainError("initial field from file is not mean-zero")
        return field
    raise ConfigurationError(f"unknown initial data kind {kind!r}")


def truncate(field, delta):
    """Keep modes with |xi| <= 1/delta inside the 2/3 band; zero mode removed."""
    lat = field.lattice
    keep = (lat.xi_abs <= 1.0 / delta) & lat.dealias_mask & (lat.xi_abs > 0)
    return SpectralScalarField(lat, np.where(keep, field.coeffs, 0.0))


def prepare_initial_data(spec, delta, lattice, beta=None):
    """Mean-zero truncation of the requested datum.

    With ``beta`` given, returns ``(field, gap)`` where gap is the homogeneous
    -beta/2 norm of the truncation error.
    """
    target = initial_target(spec, lattice)
    out = truncate(target, delta)
    if beta is None:
        return out
    gap = (target - out).norm("homogeneous", -beta / 2)
    log.info("initial truncation gap in Hdot^{-beta/2}: %.3e", gap)
    return out, gap


# --- state and ledger -------------------------------------------------------------------------

@dataclass
class SolverState:
    """One realization: theta, time, its generator, and the shared operators."""

    theta: SpectralScalarField
    time: float
    rng_state: np.random.Generator
    kernels: KernelSet
    covariance: CovarianceModel


class EnergyLedger:
    """Per-step diagnostics of each realization, arrays of shape (realizations, records)."""

    def __init__(self, realizations, p):
        self.p = p
        self._rows = []
        self.realizations = realizations

    def append(self, step, time, values):
        self._rows.append((step, time, values))

    def __len__(self):
        return len(self._rows)

    @property
    def steps(self):
        return np.array([r[0] for r in self._rows])

    @property
    def times(self):
        return np.array([r[1] for r in self._rows])

    def column(self, name):
        """Array (realizations, records) for one diagnostic column."""
        return np.stack([r[2][name] for r in self._rows], axis=1)

    def lp_defect(self):
        """Per realization: max over time of (|theta_t|_p - |theta_0|_p) / |theta_0|_p."""
        lp = self.column("lp")
        base = np.where(lp[:, :1] > 0, lp[:, :1], 1.0)
        return np.max((lp - lp[:, :1]) / base, axis=1)

    def lp_deviation(self):
        """Per realization: max over time of | |theta_t|_p / |theta_0|_p - 1 |."""
        lp = self.column("lp")
        # the zero solution stays zero, so its relative deviation is 0
        base = np.where(lp[:, :1] > 0, lp[:, :1], 1.0)
        return np.max(np.abs(lp - lp[:, :1]) / base, axis=1)

    def l2_mean_drift(self):
        """Relative change of the ensemble mean of |theta|_2^2 at the final record."""
        e = self.column("l2") ** 2
        m = e.mean(axis=0)
        if m[0] == 0:
            return 0.0
        return (m[-1] - m[0]) / m[0]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("realization",) + LEDGER_COLUMNS)
            cols = {name: self.column(name) for name in LEDGER_COLUMNS[2:]}
            steps, times = self.steps, self.times
            for i in range(self.realizations):
                for j in range(len(self)):
                    w.writerow([i, int(steps[j]), repr(float(times[j]))]
                               + [repr(float(cols[c][i, j])) for c in LEDGER_COLUMNS[2:]])


class _Operators:
    """Multipliers shared by all realizations, in half layout."""

    def __init__(self, config):
        lat = config.lattice
        self.config = config
        self.lattice = lat
        self.half = lat.n // 2 + 1
        h = self.half
        self.covariance = CovarianceModel(config.alpha, config.delta, lat, dealias=True)
        self.kernels = KernelSet(config.beta, config.delta, lat)
        self.mask = lat.rdealias_mask & ~((np.arange(lat.n)[:, None] == 0) & (np.arange(h)[None, :] == 0))
        self.rxi = lat.rxi
        self.vel = self.kernels.velocity_reg[:, :, :h]
        if config.diffusion_on:
            rate = ito_multiplier(self.covariance, config.ito_correction)[:, :h]
        else:
            rate = np.zeros((lat.n, h))
        self.rate = rate
        self.decay = np.exp(-0.5 * rate * config.dt)
        self.sampler = NoiseSampler(self.covariance) if config.noise_on else None
        self.drift = self._drift_field(config.drift_mode)
        # weights for full-lattice sums over the half layout
        self.rw = np.broadcast_to(lat.rweight[None, :], (lat.n, h))
        r = np.hypot(self.rxi[0], self.rxi[1])
        rs = np.where(r == 0, 1.0, r)
        self.w_hdot = np.where(r == 0, 0.0, rs ** (-config.beta))
        self.w_gain = (1 + r**2) ** (-config.beta / 2 + 1 - config.alpha)
        self.green = self.kernels.green_reg[:, :h]
        # drift of <theta, G theta> from the terms actually switched on
        trace = -rate * self.green
        if config.noise_on:
            trace = trace + trace_symbol(self.covariance, self.kernels, kind="galerkin",
                                         parts=("variation",))[:, :h]
        self.trace = np.where(self.mask, trace, 0.0)

    def _drift_field(self, mode):
        if mode is None:
            return None
        k1, k2, amp = mode
        lat = self.lattice
        k = np.hypot(k1, k2)
        if k == 0:
            raise ConfigurationError("drift_mode wavevector must be nonzero")
        x, y = lat.grid
        profile = amp * np.cos(2 * np.pi * (k1 * x + k2 * y) / lat.box_length)
        return np.stack([profile * k2 / k, -profile * k1 / k])

    def spectral_sum(self, weight, coeffs):
        """(1/L^2) sum over the full lattice of weight |c|^2, from half-layout c."""
        return self.lattice.mode_weight * np.sum(self.rw * weight * np.abs(coeffs) ** 2, axis=(-2, -1))

    def diagnostics(self, theta_h, phys):
        lat = self.lattice
        dA = lat.dx**2
        p = self.config.p
        absphys = np.abs(phys)
        return {
            "l1": np.sum(absphys, axis=(-2, -1)) * dA,
            "l2": np.sqrt(np.sum(phys**2, axis=(-2, -1)) * dA),
            "lp": (np.sum(absphys**p, axis=(-2, -1)) * dA) ** (1 / p),
            "hdot_neg": np.sqrt(self.spectral_sum(self.w_hdot, theta_h)),
            "h_gain": np.sqrt(self.spectral_sum(self.w_gain, theta_h)),
            "quad_form": self.spectral_sum(self.green, theta_h),
            "trace_term": self.spectral_sum(self.trace, theta_h),
        }


def _max_speed2(v):
    return float(np.max(v[:, 0] ** 2 + v[:, 1] ** 2))


def _check_cfl(ops, u_phys, dw_phys, dt, state_for_error):
    lat = ops.lattice
    speed = 0.0
    if u_phys is not None:
        speed = np.sqrt(_max_speed2(u_phys))
    if dw_phys is not None:
        speed = speed + np.sqrt(_max_speed2(dw_phys) / dt)
    if speed > 0 and dt > ops.config.cfl_safety * lat.dx / speed:
        suggested = ops.config.cfl_safety * lat.dx / speed
        raise StepRejected(f"CFL violated: dt={dt:.3e} exceeds {suggested:.3e}", suggested,
                           state_for_error)


def _advance(ops, theta_h, phys, rngs, dt, noise_map=None, digests=None):
    """One step for a batch of half-layout coefficients with physical values ``phys``.

    ``noise_map[i]`` names the generator driving batch member i (default: i-th), so
    several members can share one Brownian path.  ``digests`` are hashlib objects
    fed with each member's white draws.
    """
    lat = ops.lattice
    cfg = ops.config
    carrier = None
    if cfg.nonlinear:
        carrier = lat.rbackward(ops.vel[None] * theta_h[:, None])
    if ops.drift is not None:
        carrier = ops.drift[None] if carrier is None else carrier + ops.drift[None]
    dw = None
    if ops.sampler is not None:
        s = cfg.noise_substeps
        zeta = ops.sampler.white(rngs)
        for _ in range(s - 1):
            zeta += ops.sampler.white(rngs)
        if s > 1:
            zeta /= np.sqrt(s)
        if noise_map is not None:
            zeta = zeta[noise_map]
        if digests is not None:
            for d, z in zip(digests, zeta):
                d.update(z.tobytes())
        dw = lat.rbackward(ops.sampler.increment(zeta, dt))
    _check_cfl(ops, carrier, dw, dt, theta_h)
    if carrier is None and dw is None:
        return np.where(ops.mask, theta_h * ops.decay, 0.0)
    if carrier is None:
        carrier = dw
    else:
        carrier = carrier * dt
        if dw is not None:
            carrier += dw
    carrier *= phys[:, None]
    flux_h = lat.rforward(carrier)
    div = 2j * np.pi * (ops.rxi[0] * flux_h[:, 0] + ops.rxi[1] * flux_h[:, 1])
    return np.where(ops.mask, (theta_h - div) * ops.decay, 0.0)


def _rngs(config, first=0, count=None):
    count = config.ensemble_size if count is None else count
    return [np.random.default_rng(stream_seed(config.seed, i)) for i in range(first, first + count)]


def step(state, config):
    """Advance one realization by ``config.dt``; returns a new SolverState."""
    ops = _Operators(config)
    if state.theta.lattice != ops.lattice:
        raise ConfigurationError("state and config use different lattices")
    theta_h = state.theta.lattice.to_half(state.theta.coeffs)[None]
    try:
        new = _advance(ops, theta_h, ops.lattice.rbackward(theta_h), [state.rng_state], config.dt)
    except StepRejected as exc:
        exc.state = state
        raise
    if not np.all(np.isfinite(new)):
        raise NumericError("non-finite coefficients after step", state)
    theta = SpectralScalarField(ops.lattice, ops.lattice.to_full(new[0]))
    return SolverState(theta, state.time + config.dt, state.rng_state, state.kernels, state.covariance)


def initial_state(config, realization=0, theta0=None):
    lat = config.lattice
    if theta0 is None:
        theta0 = prepare_initial_data(config.initial, config.delta, lat)
    rng = np.random.default_rng(stream_seed(config.seed, realization))
    return SolverState(theta0, 0.0, rng, KernelSet(config.beta, config.delta, lat),
                       CovarianceModel(config.alpha, config.delta, lat, dealias=True))


@dataclass
class RunResult:
    """Ledger plus final coefficients (full layout, one array per realization)."""

    config: SolverConfig
    ledger: EnergyLedger
    final: list
    completed: bool = True
    error: Exception = None
    increments_digest: list = field(default_factory=list)

    def final_field(self, i=0):
        return SpectralScalarField(self.config.lattice, self.final[i])


def run(config, theta0=None, realizations=None, observer=None, noise_map=None):
    """Integrate the ensemble to ``t_end``, recording diagnostics at every step.

    ``theta0`` overrides the configured initial data (one field shared by every
    realization, or a list of fields).  ``observer(step, coeffs_half)`` is called
    after each recorded state.  With ``noise_map`` the batch has len(noise_map)
    members and member i is driven by noise stream ``noise_map[i]``; members mapped
    to the same stream see bit-identical increments (see ``increments_digest``).  A failing step stops the run; the partial ledger is
    returned with ``completed=False`` and the error attached.
    """
    ops = _Operators(config)
    lat = ops.lattice
    if noise_map is not None:
        if realizations is not None:
            raise ConfigurationError("noise_map and realizations are exclusive")
        streams = sorted(set(int(i) for i in noise_map))
        count = len(noise_map)
        local = np.array([streams.index(int(i)) for i in noise_map])
    else:
        count = config.ensemble_size if realizations is None else len(realizations)
        first = 0 if realizations is None else realizations[0]
        streams = list(range(first, first + count))
        local = None
    if theta0 is None:
        theta0 = prepare_initial_data(config.initial, config.delta, lat)
    fields0 = theta0 if isinstance(theta0, (list, tuple)) else [theta0] * count
    for f in fields0:
        if f.lattice != lat:
            raise ConfigurationError(f"initial field on {f.lattice}, config uses {lat}")
    theta_h = np.stack([lat.to_half(f.coeffs) for f in fields0])
    theta_h = np.where(ops.mask, theta_h, 0.0)
    rngs = [np.random.default_rng(stream_seed(config.seed, i)) for i in streams]
    digests = [hashlib.sha256() for _ in range(count)] if config.noise_on else None
    ledger = EnergyLedger(count, config.p)
    phys = lat.rbackward(theta_h)
    ledger.append(0, 0.0, ops.diagnostics(theta_h, phys))
    if observer is not None:
        observer(0, theta_h)
    error = None
    for k in range(1, config.steps + 1):
        try:
            new = _advance(ops, theta_h, phys, rngs, config.dt, local, digests)
            if not np.all(np.isfinite(new)):
                raise NumericError(f"non-finite coefficients at step {k}", theta_h)
        except NumericError as exc:
            log.warning("run aborted at step %d: %s", k, exc)
            error = exc
            break
        theta_h = new
        phys = lat.rbackward(theta_h)
        ledger.append(k, k * config.dt, ops.diagnostics(theta_h, phys))
        if observer is not None:
            observer(k, theta_h)
    final = [lat.to_full(c) for c in theta_h]
    digest = [d.hexdigest() for d in digests] if digests is not None else []
    return RunResult(config, ledger, final, error is None, error, digest)


def ensemble(config, theta0=None, workers=1):
    """Run ``config.ensemble_size`` realizations, split in contiguous blocks over workers.

    Realization i always uses generator seed ``seed ^ i`` so results do not depend on
    the split; block ledgers are merged by realization index.
    """
    m = config.ensemble_size
    workers = max(1, min(int(workers), m))
    if workers == 1:
        return run(config, theta0)
    from concurrent.futures import ThreadPoolExecutor

    bounds = np.linspace(0, m, workers + 1).astype(int)
    blocks = [list(range(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(lambda idx: run(config, theta0, realizations=idx), blocks))
    return merge_results(config, parts)


def merge_results(config, parts):
    ledger = EnergyLedger(sum(p.ledger.realizations for p in parts), config.p)
    n_rec = min(len(p.ledger) for p in parts)
    for j in range(n_rec):
        step_no, time, _ = parts[0].ledger._rows[j]
        values = {name: np.concatenate([p.ledger._rows[j][2][name] for p in parts])
                  for name in LEDGER_COLUMNS[2:]}
        ledger.append(step_no, time, values)
    final = [f for p in parts for f in p.final]
    errors = [p.error for p in parts if p.error is not None]
    digest = [d for p in parts for d in p.increments_digest]
    return RunResult(config, ledger, final, not errors, errors[0] if errors else None, digest)
