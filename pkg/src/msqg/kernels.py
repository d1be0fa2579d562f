"""Riesz potentials, regularized kernels and the fractional heat kernel.

The heat kernel p(t, x) has Fourier transform exp(-(2 pi |xi|)^beta t).  Its radial
profile at t = 1 in dimension D is computed three ways depending on the radius u:

* u <= 1: real-axis quadrature of the Bessel integral;
* 1 < u <= 30: the Bessel function is split into Hankel functions and the contour is
  rotated into the sector where both exp(-w^beta) and H^(1)(u w) decay, which removes
  the oscillatory cancellation that ruins real-axis quadrature at large u;
* u > 30: the asymptotic series sum_k c_k u^{-D-k beta}.

Other times follow from self-similarity p(t, x) = t^{-D/beta} p(1, t^{-1/beta} x).
"""

import csv
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy.special import gamma, gammaln, hankel1, jv

from . import _quadrature as quad
from .errors import ConfigurationError, DomainError, NumericError
from .lattice import SpectralScalarField, SpectralVectorField

RAY_SWITCH = 1.0
ASYMPTOTIC_SWITCH = 30.0
_EXP_CUT = 60.0


def gamma_riesz(beta):
    """Normalizing constant: G_beta(x) = |x|^{beta-2} / gamma_riesz(beta) in 2-D."""
    return 2**beta * np.pi * gamma(beta / 2) / gamma((2 - beta) / 2)


def _bessel_ratio(nu, z):
    """J_nu(z) / z^nu with the small-z series."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z < 1e-4
    out[small] = (1 - z[small] ** 2 / (4 * (nu + 1))) / (2**nu * gamma(nu + 1))
    zz = z[~small]
    out[~small] = jv(nu, zz) / zz**nu
    return out


def _profile_real_axis(u, beta, dim, rtol):
    nu = dim / 2 - 1
    wmax = _EXP_CUT ** (1 / beta)

    def f(w):
        return np.exp(-(w**beta)) * w ** (dim - 1) * _bessel_ratio(nu, u[:, None] * w[None, :])

    return (2 * np.pi) ** (-dim / 2) * quad.integrate(f, 0.0, wmax, rtol=rtol, panels=8, grading=12)


def _profile_ray(u, beta, dim, rtol):
    nu = dim / 2 - 1
    phi = np.pi / (4 * beta)
    rot = np.exp(1j * phi)
    smax = np.minimum((_EXP_CUT / np.cos(beta * phi)) ** (1 / beta), _EXP_CUT / (u * np.sin(phi)))

    def f(tau):
        s = smax[:, None] * tau[None, :]
        w = s * rot
        return smax[:, None] * np.exp(-(w**beta)) * hankel1(nu, u[:, None] * w) * s ** (dim / 2)

    val = quad.integrate(f, 0.0, 1.0, rtol=rtol, panels=8, grading=20)
    return (2 * np.pi) ** (-dim / 2) * u ** (-nu) * np.real(rot ** (1 + dim / 2) * val)


def asymptotic_coefficients(beta, dim, terms=12):
    """c_k with p(1, u) ~ sum_k c_k u^{-dim - k beta}."""
    k = np.arange(1, terms + 1)
    mag = np.exp(k * beta * np.log(2) + gammaln((dim + k * beta) / 2)
                 + gammaln(1 + k * beta / 2) - gammaln(k + 1))
    return (-1.0) ** (k + 1) * mag * np.sin(np.pi * k * beta / 2) / np.pi ** (dim / 2 + 1)


def _profile_asymptotic(u, beta, dim):
    c = asymptotic_coefficients(beta, dim)
    k = np.arange(1, c.size + 1)
    terms = c[None, :] * u[:, None] ** (-dim - k[None, :] * beta)
    return terms.sum(axis=1)


def heat_profile(u, beta, dim=2, rtol=1e-11):
    """p(1, u) in ``dim`` dimensions for an array of radii u >= 0."""
    u = np.asarray(u, dtype=float)
    flat = np.atleast_1d(u).ravel()
    if np.any(flat < 0) or not np.all(np.isfinite(flat)):
        raise DomainError("radius must be finite and nonnegative")
    out = np.empty_like(flat)
    a = flat <= RAY_SWITCH
    b = (flat > RAY_SWITCH) & (flat <= ASYMPTOTIC_SWITCH)
    c = flat > ASYMPTOTIC_SWITCH
    if a.any():
        out[a] = _profile_real_axis(flat[a], beta, dim, rtol)
    if b.any():
        out[b] = _profile_ray(flat[b], beta, dim, rtol)
    if c.any():
        out[c] = _profile_asymptotic(flat[c], beta, dim)
    return out.reshape(u.shape) if u.ndim else float(out[0])


def heat_profile_origin(beta, dim=2):
    """p(1, 0) = Gamma(dim/beta) / (beta 2^{dim-1} pi^{dim/2} Gamma(dim/2))."""
    return gamma(dim / beta) / (beta * 2 ** (dim - 1) * np.pi ** (dim / 2) * gamma(dim / 2))


def frac_heat_kernel(t, r, beta, d=2):
    """Fractional heat kernel p(t, x) at |x| = r in dimension d."""
    t = np.asarray(t, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(t <= 0):
        raise DomainError("time must be positive")
    t, r = np.broadcast_arrays(t, r)
    return t ** (-d / beta) * heat_profile(r * t ** (-1 / beta), beta, d)


def q_reference(t, r, beta, d=2):
    """Comparison kernel q(t, x) = t (t^{2/beta} + |x|^2)^{-(d+beta)/2}."""
    t = np.asarray(t, dtype=float)
    return t * (t ** (2 / beta) + np.asarray(r, dtype=float) ** 2) ** (-(d + beta) / 2)


@dataclass
class HeatKernelProbe:
    beta: float
    dimension: int
    samples: list
    band: tuple
    refined_band: tuple = None

    @property
    def C(self):
        lo, hi = self.band
        return max(hi, 1 / lo)

    @property
    def stable(self):
        if self.refined_band is None:
            return None
        return all(abs(r / c - 1) <= 0.2 for r, c in zip(self.refined_band, self.band))

    @property
    def passed(self):
        finite = all(np.isfinite(self.band)) and self.band[0] > 0
        return bool(finite and (self.stable is not False))


def _ratio_band(beta, d, t_grid, r_grid):
    T, R = np.meshgrid(np.asarray(t_grid, float), np.asarray(r_grid, float), indexing="ij")
    p = frac_heat_kernel(T, R, beta, d)
    q = q_reference(T, R, beta, d)
    return T, R, p, q


def heat_kernel_bounds_scan(beta, d, t_grid, r_grid, refine=2):
    """Scan p/q over a (t, r) grid; a grid ``refine`` times denser checks band stability."""
    t_grid = np.asarray(t_grid, float)
    r_grid = np.asarray(r_grid, float)
    if t_grid.max() / t_grid.min() < 100 or r_grid.max() / r_grid.min() < 100:
        raise ConfigurationError("heat-kernel scan needs two decades in both t and r")
    T, R, p, q = _ratio_band(beta, d, t_grid, r_grid)
    ratio = p / q
    samples = list(zip(T.ravel(), R.ravel(), p.ravel(), q.ravel()))
    band = (float(ratio.min()), float(ratio.max()))
    refined = None
    if refine and refine > 1:
        tf = np.geomspace(t_grid.min(), t_grid.max(), refine * (t_grid.size - 1) + 1)
        rf = np.geomspace(r_grid.min(), r_grid.max(), refine * (r_grid.size - 1) + 1)
        _, _, pf, qf = _ratio_band(beta, d, tf, rf)
        rr = pf / qf
        refined = (float(rr.min()), float(rr.max()))
    return HeatKernelProbe(beta, d, samples, band, refined)


class HeatProfile:
    """Cached log-radius panels of p(1, u) for time integrals of the heat kernel.

    The time integral of p over [t_lo, t_hi] at radius r equals
    beta r^{beta-D} int u^{D-beta-1} p(1, u) du over u in [r t_hi^{-1/beta}, r t_lo^{-1/beta}].
    """

    U_MIN = 1e-5
    U_MAX = 1e5
    PANEL = 0.25

    def __init__(self, beta, dim):
        self.beta = float(beta)
        self.dim = int(dim)
        lo, hi = np.log(self.U_MIN), np.log(self.U_MAX)
        self.edges = np.linspace(lo, hi, int(round((hi - lo) / self.PANEL)) + 1)
        nodes, weights = quad.panel_nodes(self.edges)
        vals = self._integrand(nodes)
        per_panel = (vals * weights).reshape(self.edges.size - 1, -1).sum(axis=1)
        self.cumulative = np.concatenate(([0.0], np.cumsum(per_panel)))
        self.p0 = heat_profile_origin(self.beta, self.dim)
        self.tail_coeffs = asymptotic_coefficients(self.beta, self.dim)

    def _integrand(self, v):
        u = np.exp(v)
        return u ** (self.dim - self.beta) * heat_profile(u, self.beta, self.dim)

    def _primitive(self, u):
        """int_0^u s^{D-beta-1} p(1, s) ds for scalar u > 0 (may be inf)."""
        s = self.dim - self.beta
        if u <= self.U_MIN:
            return self.p0 * u**s / s
        head = self.p0 * self.U_MIN**s / s
        if u >= self.U_MAX:
            k = np.arange(1, self.tail_coeffs.size + 1)
            tail_from_max = np.sum(self.tail_coeffs * self.U_MAX ** (-(k + 1) * self.beta)
                                   / ((k + 1) * self.beta))
            if np.isinf(u):
                return head + self.cumulative[-1] + tail_from_max
            tail_from_u = np.sum(self.tail_coeffs * u ** (-(k + 1) * self.beta) / ((k + 1) * self.beta))
            return head + self.cumulative[-1] + tail_from_max - tail_from_u
        v = np.log(u)
        j = min(int(np.searchsorted(self.edges, v, side="right")) - 1, self.edges.size - 2)
        nodes, weights = quad.panel_nodes([self.edges[j], v])
        partial = float(self._integrand(nodes) @ weights)
        return head + self.cumulative[j] + partial

    def time_integral(self, r, t_lo, t_hi):
        """int_{t_lo}^{t_hi} p_D(t, r) dt; t_lo may be 0 and t_hi may be inf."""
        b = self.beta
        u_hi = np.inf if t_lo == 0 else r * t_lo ** (-1 / b)
        u_lo = 0.0 if np.isinf(t_hi) else r * t_hi ** (-1 / b)
        inner = self._primitive(u_hi) - (self._primitive(u_lo) if u_lo > 0 else 0.0)
        return b * r ** (b - self.dim) * inner


@lru_cache(maxsize=32)
def heat_profile_table(beta, dim):
    return HeatProfile(beta, dim)


def green_reg_multiplier(rho, beta, delta):
    """Fourier multiplier of G_beta^delta at radius rho (value 1/delta - delta at 0)."""
    rho = np.asarray(rho, dtype=float)
    s = (2 * np.pi * rho) ** beta
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (np.exp(-s * delta) - np.exp(-s / delta)) / s
        # expm1 form avoids cancellation for small s
        small = s * (1 / delta) < 1e-3
        out = np.where(small, (np.expm1(-s * delta) - np.expm1(-s / delta)) / np.where(s == 0, 1, s), out)
    return np.where(rho == 0, 1 / delta - delta, out)


def green_exact_physical(r, beta):
    return np.asarray(r, float) ** (beta - 2) / gamma_riesz(beta)


def green_reg_time_route(r, beta, delta):
    """G_beta^delta(r) as the time integral of the heat kernel over [delta, 1/delta]."""
    prof = heat_profile_table(float(beta), 2)
    return np.array([prof.time_integral(float(x), delta, 1 / delta) for x in np.atleast_1d(r)])


def green_reg_fourier_route(r, beta, delta, rtol=1e-11):
    """G_beta^delta(r) as the radial inverse transform of the Fourier multiplier.

    Real-axis quadrature with panels shorter than a quarter Bessel period.
    """
    r = np.atleast_1d(np.asarray(r, float))
    rho_max = (_EXP_CUT / delta) ** (1 / beta) / (2 * np.pi)
    out = np.empty_like(r)
    for i, x in enumerate(r):
        panels = max(16, int(np.ceil(rho_max * x * 4)))

        def f(rho):
            return 2 * np.pi * green_reg_multiplier(rho, beta, delta) * jv(0, 2 * np.pi * rho * x) * rho

        out[i] = quad.integrate(f, 0.0, rho_max, rtol=rtol, atol=1e-15, panels=panels, grading=12)
    return out


class KernelSet:
    """Exact and regularized Riesz multipliers on a lattice."""

    def __init__(self, beta, delta, lattice):
        if not 1.0 < beta < 2.0:
            raise ConfigurationError(f"beta must lie in (1, 2), got {beta}")
        if not 0.0 < delta < 1.0:
            raise ConfigurationError(f"delta must lie in (0, 1), got {delta}")
        self.beta = float(beta)
        self.delta = float(delta)
        self.lattice = lattice

    def __repr__(self):
        return f"KernelSet(beta={self.beta}, delta={self.delta}, lattice={self.lattice})"

    @cached_property
    def green_exact(self):
        r = self.lattice.xi_abs
        out = np.zeros_like(r)
        nz = r > 0
        out[nz] = (2 * np.pi * r[nz]) ** (-self.beta)
        return out

    @cached_property
    def green_reg(self):
        out = green_reg_multiplier(self.lattice.xi_abs, self.beta, self.delta)
        out[0, 0] = 0.0
        return out

    def _velocity(self, green):
        xi = self.lattice.xi
        # (2 pi i xi)^perp with perp(a, b) = (b, -a)
        return np.stack([2j * np.pi * xi[1] * green, -2j * np.pi * xi[0] * green])

    @cached_property
    def velocity_reg(self):
        return self._velocity(self.green_reg)

    @cached_property
    def velocity_exact(self):
        return self._velocity(self.green_exact)

    def cross_validate(self, radii=(0.05, 0.1, 0.3, 1.0, 3.0), rtol=1e-6):
        """Compare the Fourier-formula and heat-kernel routes for G_beta^delta.

        Returns the max relative discrepancy; raises NumericError beyond ``rtol``.
        """
        a = green_reg_fourier_route(radii, self.beta, self.delta)
        b = green_reg_time_route(radii, self.beta, self.delta)
        err = float(np.max(np.abs(a - b) / np.abs(b)))
        if err > rtol:
            raise NumericError(f"kernel routes disagree: max relative gap {err:.3e} > {rtol}")
        return err


def build_kernels(beta, delta, lattice):
    return KernelSet(beta, delta, lattice)


def velocity_from_scalar(theta, kernels, mode="regularized"):
    """u_hat = (2 pi i xi)^perp G_hat theta_hat as a divergence-free vector field."""
    c = theta.coeffs
    scale = np.max(np.abs(c))
    if abs(c[0, 0]) > 1e-12 * max(scale, 1e-300):
        raise DomainError("velocity needs a mean-zero scalar")
    if mode == "regularized":
        mult = kernels.velocity_reg
    elif mode == "exact":
        mult = kernels.velocity_exact
    else:
        raise ConfigurationError(f"unknown velocity mode {mode!r}")
    return SpectralVectorField.from_coeffs(theta.lattice, mult * c, divergence_free=True)


# --- pointwise error of the regularized kernel -------------------------------------------

def kernel_derivative_errors(r, beta, delta):
    """|grad(G - G^delta)| and operator norm |D^2(G - G^delta)| at radii ``r``.

    Uses grad p_2 = -2 pi x p_4 and D^2 p_2 = -2 pi p_4 I + 4 pi^2 p_6 x x^T, integrated
    over t in (0, delta) and (1/delta, inf).
    """
    p4 = heat_profile_table(float(beta), 4)
    p6 = heat_profile_table(float(beta), 6)
    grad, hess = [], []
    for x in np.atleast_1d(np.asarray(r, float)):
        i4 = p4.time_integral(x, 0.0, delta) + p4.time_integral(x, 1 / delta, np.inf)
        i6 = p6.time_integral(x, 0.0, delta) + p6.time_integral(x, 1 / delta, np.inf)
        grad.append(2 * np.pi * x * i4)
        radial = -2 * np.pi * i4 + 4 * np.pi**2 * x**2 * i6
        hess.append(max(abs(radial), abs(2 * np.pi * i4)))
    return np.array(grad), np.array(hess)


def kernel_regime(r, beta, delta):
    inner = delta ** (1 / (beta + 3))
    outer = delta ** (-1 / beta)
    return np.where(r < inner, "inner", np.where(r > outer, "outer", "middle"))


def gradient_envelope(r, beta, delta):
    reg = kernel_regime(r, beta, delta)
    return np.where(reg == "middle", np.sqrt(delta), np.asarray(r, float) ** (beta - 3))


def hessian_envelope(r, beta, delta):
    r = np.asarray(r, float)
    return delta + np.where(r <= delta ** (1 / (4 + beta)), r ** (beta - 4), 0.0)


@dataclass
class KernelErrorReport:
    beta: float
    delta: float
    rows: list = field(default_factory=list)  # (quantity, regime, r, measured, envelope, ratio)
    constants: dict = field(default_factory=dict)  # (quantity, regime) -> max ratio

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["regime", "|x|", "measured", "envelope", "ratio", "quantity"])
            for q, reg, r, m, e, ratio in self.rows:
                w.writerow([reg, repr(r), repr(m), repr(e), repr(ratio), q])


def kernel_error_scan(beta, delta, radii):
    """Measure derivative errors of G^delta against the piecewise envelopes."""
    radii = np.sort(np.asarray(radii, float))
    regimes = kernel_regime(radii, beta, delta)
    missing = {"inner", "middle", "outer"} - set(regimes.tolist())
    if missing:
        raise ConfigurationError(f"radii do not cover regime(s) {sorted(missing)}")
    grad, hess = kernel_derivative_errors(radii, beta, delta)
    ge = gradient_envelope(radii, beta, delta)
    he = hessian_envelope(radii, beta, delta)
    rep = KernelErrorReport(beta, delta)
    for q, meas, env in (("grad", grad, ge), ("hess", hess, he)):
        for r, reg, m, e in zip(radii, regimes, meas, env):
            rep.rows.append((q, str(reg), float(r), float(m), float(e), float(m / e)))
            key = (q, str(reg))
            rep.constants[key] = max(rep.constants.get(key, 0.0), float(m / e))
    return rep


def kernel_error_stability(beta, deltas, radii_per_delta=24, factor=2.0):
    """Run the scan at each delta and compare fitted constants.

    A constant is stable when it does not grow by more than ``factor`` from the largest
    to any smaller delta (the envelopes are upper bounds, so shrinking is allowed).
    Returns (passed, reports, growth) with growth the worst ratio per key.
    """
    reports = []
    for d in deltas:
        lo = d ** (1 / (beta + 3)) / 10
        hi = d ** (-1 / beta) * 10
        reports.append(kernel_error_scan(beta, d, np.geomspace(lo, hi, radii_per_delta)))
    base = reports[0].constants
    growth = {}
    for rep in reports[1:]:
        for k, v in rep.constants.items():
            growth[k] = max(growth.get(k, 0.0), v / base[k])
    passed = all(g <= factor for g in growth.values())
    return passed, reports, growth
