"""Kraichnan covariance: spectrum, mollifier, Ito constant, structure functions, noise."""

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import gamma, kv

from . import _quadrature as quad
from .errors import ConfigurationError, DomainError
from .lattice import Lattice, SpectralScalarField, SpectralVectorField


def chi(r):
    """Smooth transition: 1 on [0, 1], 0 on [2, inf), exp(-1/s) blend in between."""
    r = np.asarray(r, dtype=float)
    out = np.where(r <= 1.0, 1.0, 0.0)
    mid = (r > 1.0) & (r < 2.0)
    if np.any(mid):
        rm = r[mid]
        a = np.exp(-1.0 / (2.0 - rm))
        b = np.exp(-1.0 / (rm - 1.0))
        out = out.astype(float)
        out[mid] = a / (a + b)
    return out if out.ndim else float(out)


def mollifier_hat(r, delta):
    """Fourier profile of the mollifier at radius ``r``: chi(delta * r)."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise DomainError("mollifier radius must be nonnegative")
    _check_delta(delta)
    return chi(delta * r)


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")


def _check_delta(delta):
    if not 0.0 < delta <= 1.0:
        raise ConfigurationError(f"delta must lie in (0, 1], got {delta}")


def radial_spectrum(r, alpha, delta):
    """g(r) = <r>^{-2-2 alpha} chi(delta r)^2."""
    r = np.asarray(r, dtype=float)
    return (1.0 + r**2) ** (-1.0 - alpha) * chi(delta * r) ** 2


def spectrum_at(xi, alpha, delta):
    """2x2 spectral density g(xi) (I - xi xi^T / |xi|^2); zero matrix at xi = 0."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (2,) or not np.all(np.isfinite(xi)):
        raise DomainError("xi must be a finite 2-vector")
    r2 = xi @ xi
    if r2 == 0.0:
        return np.zeros((2, 2))
    g = radial_spectrum(np.sqrt(r2), alpha, delta)
    perp = np.array([xi[1], -xi[0]])
    return g * np.outer(perp, perp) / r2


@dataclass(frozen=True)
class QuadratureSpec:
    """Radial quadrature for the continuum Ito constant.

    ``panels`` is the starting panel count per sub-interval (doubled until ``rtol``
    is met); ``cutoff`` defaults to 2/delta and may not be smaller.
    """

    panels: int = 16
    cutoff: float | None = None
    rtol: float = 1e-12


def c_delta_continuum(alpha, delta, quadrature_spec=None):
    """Half the trace of the mollified covariance at 0, by radial quadrature.

    The integrand pi r <r>^{-2-2 alpha} chi(delta r)^2 is integrated on [0, 1],
    geometrically over [1, 1/delta] and uniformly over the transition [1/delta, 2/delta].
    """
    _check_alpha(alpha)
    _check_delta(delta)
    spec = quadrature_spec or QuadratureSpec()
    cutoff = 2.0 / delta if spec.cutoff is None else spec.cutoff
    if cutoff < 2.0 / delta * (1 - 1e-14):
        raise ConfigurationError(f"cutoff {cutoff} below the mollifier support 2/delta")

    def integrand(r):
        return np.pi * r * radial_spectrum(r, alpha, delta)

    total = quad.integrate(integrand, 0.0, min(1.0, 1.0 / delta), rtol=spec.rtol,
                           panels=spec.panels)
    if delta < 1.0:
        # log-substitution r = exp(v) over [1, 1/delta]
        total += quad.integrate(lambda v: integrand(np.exp(v)) * np.exp(v), 0.0,
                                np.log(1.0 / delta), rtol=spec.rtol, panels=spec.panels)
    total += quad.integrate(integrand, 1.0 / delta, 2.0 / delta, rtol=spec.rtol,
                            panels=spec.panels)
    return float(total)


class CovarianceModel:
    """Mollified Kraichnan covariance restricted to a lattice.

    With ``dealias=True`` only modes kept by the 2/3 rule carry noise; this is the
    set actually sampled by the time stepper.
    """

    def __init__(self, alpha, delta, lattice, dealias=False):
        _check_alpha(alpha)
        _check_delta(delta)
        self.alpha = float(alpha)
        self.delta = float(delta)
        self.lattice = lattice
        self.dealias = bool(dealias)

    def __repr__(self):
        return (f"CovarianceModel(alpha={self.alpha}, delta={self.delta}, "
                f"lattice={self.lattice}, dealias={self.dealias})")

    @cached_property
    def spectrum(self):
        """Per-mode g(xi), zero at xi = 0 and outside the sampled set."""
        lat = self.lattice
        g = radial_spectrum(lat.xi_abs, self.alpha, self.delta)
        g[0, 0] = 0.0
        if self.dealias:
            g = np.where(lat.dealias_mask, g, 0.0)
        else:
            # Nyquist modes have no conjugate partner; drop them to keep fields real
            nyq = np.abs(lat.index) == lat.n // 2
            g = np.where(nyq[:, None] | nyq[None, :], 0.0, g)
        g.setflags(write=False)
        return g

    @cached_property
    def projector(self):
        """Components (P11, P12, P22) of I - xi xi^T/|xi|^2 (zero at xi = 0)."""
        xi = self.lattice.xi
        r2 = xi[0] ** 2 + xi[1] ** 2
        r2s = np.where(r2 == 0, 1.0, r2)
        p11 = np.where(r2 == 0, 0.0, xi[1] ** 2 / r2s)
        p22 = np.where(r2 == 0, 0.0, xi[0] ** 2 / r2s)
        p12 = np.where(r2 == 0, 0.0, -xi[0] * xi[1] / r2s)
        return p11, p12, p22

    @cached_property
    def spectral_matrix(self):
        """Q_hat components (11, 12, 22) per lattice mode."""
        return tuple(self.spectrum * p for p in self.projector)

    @cached_property
    def c_delta_lattice(self):
        return 0.5 * self.lattice.mode_weight * float(np.sum(self.spectrum))

    @cached_property
    def c_delta_continuum(self):
        return c_delta_continuum(self.alpha, self.delta)

    @property
    def lattice_gap(self):
        """c_delta_lattice minus the continuum constant (the lattice quadrature error)."""
        return self.c_delta_lattice - self.c_delta_continuum

    @property
    def resolved(self):
        """True when the whole mollified band |xi| < 2/delta fits on the sampled set."""
        lat = self.lattice
        top = (lat.dealias_cutoff if self.dealias else lat.n // 2 - 1) / lat.box_length
        return 2.0 / self.delta <= top

    @cached_property
    def covariance_grid(self):
        """Q(x) components (11, 12, 22) on the physical grid via inverse FFT."""
        lat = self.lattice
        return tuple(lat.backward(q).real for q in self.spectral_matrix)

    def covariance_real(self, x):
        return covariance_real(x, self)


def covariance_real(x, model):
    """Lattice inverse transform of the spectral matrix at point(s) ``x``.

    ``x`` has shape (2,) or (m, 2); returns (2, 2) or (m, 2, 2).
    """
    lat = model.lattice
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    g = model.spectrum
    sel = g > 0
    xi = lat.xi[:, sel]
    q11, q12, q22 = (q[sel] for q in model.spectral_matrix)
    phase = np.cos(2 * np.pi * (pts @ xi))  # spectrum is even, so the sine part cancels
    w = lat.mode_weight
    out = np.empty((pts.shape[0], 2, 2))
    out[:, 0, 0] = w * phase @ q11
    out[:, 0, 1] = out[:, 1, 0] = w * phase @ q12
    out[:, 1, 1] = w * phase @ q22
    return out[0] if np.ndim(x) == 1 else out


def structure_continuum(R, alpha):
    """Exact (unmollified, whole-plane) longitudinal and transverse structure values.

    B_L(R) = [1 - z^{1+a} K_{1+a}(z) / (2^a Gamma(1+a))] / (2 pi R^2) with z = 2 pi R,
    and B_L + B_N = 2 pi (pi R)^a K_a(2 pi R) / Gamma(1+a).
    """
    R = np.asarray(R, dtype=float)
    a = alpha
    z = 2 * np.pi * R
    with np.errstate(invalid="ignore", divide="ignore"):
        small = z < 1e-3
        zs = np.where(small, 1.0, z)
        bl = (1 - zs ** (1 + a) * kv(1 + a, zs) / (2**a * gamma(1 + a))) / (2 * np.pi * np.where(small, 1.0, R) ** 2)
        tr = 2 * np.pi * (np.pi * np.where(small, 1.0, R)) ** a * kv(a, zs) / gamma(1 + a)
    b0 = np.pi / (2 * a)
    beta_l = structure_beta_L(alpha)
    # two-term small-R expansion where the closed form loses digits
    bl_small = b0 - beta_l * R ** (2 * a)
    bn_small = b0 - (1 + 2 * a) * beta_l * R ** (2 * a)
    bl = np.where(small, bl_small, bl)
    bn = np.where(small, bn_small, tr - bl)
    return bl, bn


def structure_beta_L(alpha):
    """Leading small-R coefficient of pi/(2 alpha) - B_L(R)."""
    return np.pi ** (1 + 2 * alpha) * gamma(-1 - alpha) / (2 * gamma(1 + alpha))


@dataclass
class StructureReport:
    radii: np.ndarray
    B_L_values: np.ndarray
    B_N_values: np.ndarray
    beta_L_fit: float
    beta_N_fit: float
    ratio: float
    slope_L: float = np.nan
    slope_N: float = np.nan
    slope_norm: float = np.nan
    window: tuple = (np.nan, np.nan)
    origin_value: float = np.nan
    extras: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["R", "B_L", "B_N"])
            for r, bl, bn in zip(self.radii, self.B_L_values, self.B_N_values):
                w.writerow([repr(float(r)), repr(float(bl)), repr(float(bn))])


def _loglog_slope(x, y):
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope), float(intercept)


def structure_functions(model, window=None):
    """Longitudinal/transverse structure values along the first lattice axis and fits.

    The deficits Q(0) - B(R) are fitted on log-log axes over ``window`` (default
    [4 delta, min(1, L/8)]): free slopes are reported, and amplitudes beta_L, beta_N
    are fitted with the exponent pinned to 2 alpha.
    """
    lat = model.lattice
    L = lat.box_length
    if window is None:
        window = (4 * model.delta, min(1.0, L / 8))
    lo, hi = window
    if L / 4 < 10 * max(model.delta, lat.dx):
        raise ConfigurationError(
            f"radial range [{max(model.delta, lat.dx):.3g}, {L / 4:.3g}] is shorter than a decade; "
            f"increase n or box length"
        )
    q11, _, q22 = model.covariance_grid
    idx = np.arange(1, lat.n // 2)
    radii = idx * lat.dx
    bl = q11[idx, 0]
    bn = q22[idx, 0]
    b0 = q11[0, 0]
    sel = (radii >= lo * (1 - 1e-12)) & (radii <= hi * (1 + 1e-12))
    if sel.sum() < 3:
        raise ConfigurationError(
            f"fit window [{lo:.3g}, {hi:.3g}] holds {sel.sum()} lattice radii; "
            f"achievable range is [{lat.dx:.3g}, {L / 2:.3g}]"
        )
    dl = b0 - bl[sel]
    dn = b0 - bn[sel]
    r = radii[sel]
    two_a = 2 * model.alpha
    beta_l = float(np.exp(np.mean(np.log(dl) - two_a * np.log(r))))
    beta_n = float(np.exp(np.mean(np.log(dn) - two_a * np.log(r))))
    slope_l, _ = _loglog_slope(r, dl)
    slope_n, _ = _loglog_slope(r, dn)
    slope_norm, _ = _loglog_slope(r, np.maximum(np.abs(dl), np.abs(dn)))
    return StructureReport(
        radii=radii, B_L_values=bl, B_N_values=bn,
        beta_L_fit=beta_l, beta_N_fit=beta_n, ratio=beta_n / beta_l,
        slope_L=slope_l, slope_N=slope_n, slope_norm=slope_norm,
        window=(float(lo), float(hi)), origin_value=float(b0),
    )


class NoiseSampler:
    """Batched divergence-free increments in half-spectrum layout.

    Coefficients are i L sqrt(dt g(xi)) (xi_perp/|xi|) zeta_xi where zeta is the
    transform of unit white noise divided by n, so conjugate pairs come for free.
    The factor i compensates for xi_perp being odd in xi.
    """

    def __init__(self, model):
        self.model = model
        lat = model.lattice
        half = lat.n // 2 + 1
        g = model.spectrum[:, :half]
        xi = lat.rxi
        r = np.hypot(xi[0], xi[1])
        rs = np.where(r == 0, 1.0, r)
        amp = 1j * lat.box_length * np.sqrt(g)
        # xi_perp = (xi_2, -xi_1)
        self.amp = np.stack([amp * xi[1] / rs, -amp * xi[0] / rs])

    def white(self, rngs):
        """One unit-variance complex Gaussian array per generator, half layout."""
        n = self.model.lattice.n
        w = np.stack([rng.standard_normal((n, n)) for rng in rngs])
        return np.fft.rfft2(w) / n

    def increment(self, zeta, dt):
        """Spectral increments (batch, 2, n, n//2+1) for white draws ``zeta``."""
        return np.sqrt(dt) * self.amp[None] * zeta[:, None]


def sample_noise_increment(model, dt, rng_state):
    """Draw one increment W(t + dt) - W(t) as a SpectralVectorField.

    ``rng_state`` is a numpy Generator or an integer seed; the advanced generator is
    returned alongside the field.
    """
    if not dt > 0:
        raise DomainError(f"time step must be positive, got {dt}")
    rng = rng_state if isinstance(rng_state, np.random.Generator) else np.random.default_rng(rng_state)
    sampler = NoiseSampler(model)
    half = sampler.increment(sampler.white([rng]), dt)[0]
    lat = model.lattice
    full = lat.to_full(half)
    return SpectralVectorField.from_coeffs(lat, full, divergence_free=True), rng


def circular_convolve(a, b):
    """Circular convolution over lattice indices (no physical scaling)."""
    return np.fft.ifft2(np.fft.fft2(a) * np.fft.fft2(b)).real


def ito_multiplier(model, kind="galerkin"):
    """Per-mode rate m(xi) of the Ito correction, so that theta_hat decays like exp(-m dt / 2).

    ``kind="laplacian"`` gives c_delta_lattice (2 pi |xi|)^2.  ``kind="galerkin"`` sums
    only over intermediate modes eta kept by the 2/3 rule,

        m(xi) = (2 pi)^2 / L^2 sum_{eta in P} g(xi - eta) xi^T Pi(xi - eta) xi,

    which is the exact quadratic variation of the projected transport noise; it equals
    the Laplacian rate wherever xi + supp(g) stays inside the retained set.
    """
    lat = model.lattice
    xi = lat.xi
    if kind == "laplacian":
        return model.c_delta_lattice * (2 * np.pi * lat.xi_abs) ** 2
    if kind != "galerkin":
        raise ConfigurationError(f"unknown Ito correction {kind!r}")
    keep = lat.dealias_mask.astype(float)
    q11, q12, q22 = model.spectral_matrix
    c11, c12, c22 = (circular_convolve(keep, q) for q in (q11, q12, q22))
    quadform = xi[0] ** 2 * c11 + 2 * xi[0] * xi[1] * c12 + xi[1] ** 2 * c22
    return (2 * np.pi) ** 2 * lat.mode_weight * quadform


def stream_seed(master_seed, index):
    """Seed of realization ``index``: master_seed XOR index."""
    return int(master_seed) ^ int(index)
