"""Periodic Fourier lattice, spectral fields, Sobolev norms and dealiased products.

Conventions: the transform is f_hat(xi) = int f(x) exp(-2 pi i x.xi) dx with xi in
cycles per unit length, approximated on [0, L)^2 by the rectangle rule, so
``coeffs = fft2(f) * dx**2``.  Lattice integrals over frequency carry the weight
``1 / L**2`` per mode.
"""

import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from .errors import ConfigurationError, DataError, DomainError

MAGIC = b"MSQG"
_HEADER = struct.Struct("<4sId")

# FFT worker threads; the CLI overrides this from --workers.
FFT_WORKERS = 1


@dataclass(frozen=True, eq=True)
class Lattice:
    """Square periodic lattice with ``n`` points per axis on a box of side ``box_length``."""

    n: int
    box_length: float = 1.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 8 or self.n % 2:
            raise ConfigurationError(f"lattice size must be an even integer >= 8, got {self.n}")
        if not np.isfinite(self.box_length) or self.box_length <= 0:
            raise ConfigurationError(f"box length must be positive, got {self.box_length}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "box_length", float(self.box_length))

    # geometry
    @property
    def dx(self):
        return self.box_length / self.n

    @property
    def mode_weight(self):
        """Frequency cell area 1/L**2 used in lattice frequency integrals."""
        return 1.0 / self.box_length**2

    @cached_property
    def index(self):
        """Integer frequency indices in FFT order, shape (n,)."""
        return np.fft.fftfreq(self.n, 1.0 / self.n).astype(int)

    @cached_property
    def xi(self):
        """Frequency components, shape (2, n, n), in cycles per unit length."""
        k = self.index / self.box_length
        return np.stack(np.meshgrid(k, k, indexing="ij"))

    @cached_property
    def xi_abs(self):
        return np.hypot(self.xi[0], self.xi[1])

    @cached_property
    def grid(self):
        """Physical coordinates, shape (2, n, n)."""
        x = np.arange(self.n) * self.dx
        return np.stack(np.meshgrid(x, x, indexing="ij"))

    @property
    def dealias_cutoff(self):
        """Largest retained integer index per axis under the 2/3 rule."""
        return (self.n - 1) // 3

    @cached_property
    def dealias_mask(self):
        keep = np.abs(self.index) <= self.dealias_cutoff
        return keep[:, None] & keep[None, :]

    # half-spectrum (real FFT) layout used by the time stepper
    @cached_property
    def rxi(self):
        kx = self.index / self.box_length
        ky = np.arange(self.n // 2 + 1) / self.box_length
        return np.stack(np.meshgrid(kx, ky, indexing="ij"))

    @cached_property
    def rdealias_mask(self):
        return self.dealias_mask[:, : self.n // 2 + 1]

    @cached_property
    def rweight(self):
        """Multiplicity of each half-spectrum column in full-spectrum sums."""
        w = np.full(self.n // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return w

    def negate_index(self, arr):
        """Return arr evaluated at -xi (same shape, FFT order)."""
        return np.roll(np.flip(arr, axis=(-2, -1)), 1, axis=(-2, -1))

    # transforms on raw arrays (leading batch axes allowed)
    def forward(self, values):
        return sfft.fft2(values, workers=FFT_WORKERS) * self.dx**2

    def backward(self, coeffs):
        return sfft.ifft2(coeffs, workers=FFT_WORKERS) / self.dx**2

    def rforward(self, values):
        return sfft.rfft2(values, workers=FFT_WORKERS) * self.dx**2

    def rbackward(self, coeffs):
        return sfft.irfft2(coeffs, s=(self.n, self.n), workers=FFT_WORKERS) / self.dx**2

    def to_half(self, coeffs):
        return np.asarray(coeffs)[..., : self.n // 2 + 1]

    def to_full(self, half):
        """Expand half-spectrum coefficients of a real field to the full array."""
        half = np.asarray(half)
        n = self.n
        full = np.empty(half.shape[:-1] + (n,), dtype=complex)
        full[..., : n // 2 + 1] = half
        # coefficient at (kx, -ky) is conj of (-kx, ky)
        cols = np.arange(n // 2 + 1, n)
        rows = (-self.index) % n
        full[..., cols] = np.conj(half[..., rows, :][..., n - cols])
        return full


def _check_lattice(a, b):
    if a != b:
        raise ConfigurationError(f"lattice mismatch: {a} vs {b}")


@dataclass(frozen=True, eq=False)
class SpectralScalarField:
    """Fourier coefficients of a scalar field on a lattice (units of field times area)."""

    lattice: Lattice
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        if c.shape != (self.lattice.n, self.lattice.n):
            raise ConfigurationError(
                f"coefficient shape {c.shape} does not match lattice n={self.lattice.n}"
            )
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_physical(cls, values, lattice):
        return transform(values, lattice)

    @classmethod
    def zeros(cls, lattice):
        return cls(lattice, np.zeros((lattice.n, lattice.n), dtype=complex))

    def to_physical(self):
        return inverse(self)

    @property
    def mean(self):
        return self.coeffs[0, 0].real / self.lattice.box_length**2

    def hermitian_defect(self):
        """Max |c(-xi) - conj c(xi)| relative to max |c|; 0 for real fields."""
        c = self.coeffs
        scale = np.max(np.abs(c))
        if scale == 0:
            return 0.0
        return float(np.max(np.abs(self.lattice.negate_index(c) - np.conj(c))) / scale)

    def norm(self, kind="inhomogeneous", s=0.0, beta=None):
        return sobolev_norm(self, kind, s=s, beta=beta)

    def __add__(self, other):
        _check_lattice(self.lattice, other.lattice)
        return SpectralScalarField(self.lattice, self.coeffs + other.coeffs)

    def __sub__(self, other):
        _check_lattice(self.lattice, other.lattice)
        return SpectralScalarField(self.lattice, self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return SpectralScalarField(self.lattice, self.coeffs * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return SpectralScalarField(self.lattice, -self.coeffs)


@dataclass(frozen=True, eq=False)
class SpectralVectorField:
    """Two spectral components on one lattice."""

    x: SpectralScalarField
    y: SpectralScalarField
    divergence_free: bool = False

    def __post_init__(self):
        _check_lattice(self.x.lattice, self.y.lattice)
        if self.divergence_free:
            scale = float(np.max(self.lattice.xi_abs * np.hypot(np.abs(self.x.coeffs), np.abs(self.y.coeffs))))
            # xi_1 (xi_2 c) and xi_2 (xi_1 c) may differ in the last bit
            if self.divergence_defect() > 8 * np.finfo(float).eps * scale:
                raise DataError("field flagged divergence-free has nonzero xi.v_hat")

    @classmethod
    def from_coeffs(cls, lattice, coeffs, divergence_free=False):
        return cls(
            SpectralScalarField(lattice, coeffs[0]),
            SpectralScalarField(lattice, coeffs[1]),
            divergence_free,
        )

    @property
    def lattice(self):
        return self.x.lattice

    @property
    def coeffs(self):
        return np.stack([self.x.coeffs, self.y.coeffs])

    def divergence_defect(self):
        xi = self.lattice.xi
        return float(np.max(np.abs(xi[0] * self.x.coeffs + xi[1] * self.y.coeffs)))

    def to_physical(self):
        return np.stack([inverse(self.x), inverse(self.y)])


def transform(values, lattice):
    """Spectral coefficients of a real (or complex) physical array."""
    values = np.asarray(values)
    if values.shape != (lattice.n, lattice.n):
        raise ConfigurationError(
            f"array shape {values.shape} does not match lattice n={lattice.n}"
        )
    if not np.all(np.isfinite(values)):
        raise DataError("non-finite values in physical field")
    return SpectralScalarField(lattice, lattice.forward(values))


def inverse(field, real=True):
    """Physical values of a spectral field; the real part unless ``real`` is False."""
    out = field.lattice.backward(field.coeffs)
    return out.real if real else out


def _norm_weight(lattice, kind, s, beta):
    r = lattice.xi_abs
    bracket2 = 1.0 + r**2
    if kind == "homogeneous":
        w = np.zeros_like(r)
        nz = r > 0
        w[nz] = r[nz] ** (2 * s)
        return w
    if kind == "inhomogeneous":
        return bracket2**s
    if kind == "mixed_tilde":
        if beta is None:
            raise ConfigurationError("mixed_tilde norm needs beta")
        w = np.zeros_like(r)
        nz = r > 0
        w[nz] = bracket2[nz] ** (beta - 5) * r[nz] ** (2 - 2 * beta)
        return w
    raise ConfigurationError(f"unknown norm kind {kind!r}")


def sobolev_norm(field, kind="inhomogeneous", s=0.0, beta=None):
    """Lattice quadrature of a Sobolev-scale norm.

    ``kind`` is "homogeneous" (weight |xi|^{2s}, zero mode skipped), "inhomogeneous"
    (weight <xi>^{2s}) or "mixed_tilde" (weight <xi>^{2 beta - 10} |xi|^{2 - 2 beta}).
    """
    c = field.coeffs
    if kind == "homogeneous" and s < 0:
        scale = np.max(np.abs(c))
        if abs(c[0, 0]) > 1e-12 * max(scale, 1e-300):
            raise DomainError("homogeneous norm undefined for non-mean-zero field")
    w = _norm_weight(field.lattice, kind, s, beta)
    return float(np.sqrt(field.lattice.mode_weight * np.sum(w * np.abs(c) ** 2)))


def dealias(coeffs, lattice):
    return np.where(lattice.dealias_mask, coeffs, 0.0)


def dealiased_product(f, g):
    """Spectral coefficients of f*g with the 2/3 rule applied before and after."""
    _check_lattice(f.lattice, g.lattice)
    lat = f.lattice
    fp = lat.backward(dealias(f.coeffs, lat))
    gp = lat.backward(dealias(g.coeffs, lat))
    return SpectralScalarField(lat, dealias(lat.forward(fp * gp), lat))


def write_msqg(path, coeffs, box_length):
    """Write an n x n coefficient array in the MSQG binary layout."""
    c = np.ascontiguousarray(coeffs, dtype="<c16")
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ConfigurationError(f"MSQG dump needs a square array, got shape {c.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, c.shape[0], float(box_length)))
        fh.write(c.tobytes(order="C"))


def read_msqg(path):
    """Return (n, box_length, coeffs) from an MSQG binary file."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DataError(f"{path}: truncated MSQG header")
        magic, n, box_length = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        body = fh.read()
    if len(body) != 16 * n * n:
        raise DataError(f"{path}: expected {16 * n * n} payload bytes, found {len(body)}")
    coeffs = np.frombuffer(body, dtype="<c16").reshape(n, n).astype(complex)
    return n, box_length, coeffs


def save_field(path, field):
    write_msqg(path, field.coeffs, field.lattice.box_length)


def load_field(path):
    n, box_length, coeffs = read_msqg(path)
    return SpectralScalarField(Lattice(n, box_length), coeffs)
