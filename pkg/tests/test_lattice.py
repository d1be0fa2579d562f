import numpy as np
import pytest

from msqg.errors import ConfigurationError, DataError, DomainError
from msqg.kernels import KernelSet, velocity_from_scalar
from msqg.lattice import (Lattice, SpectralScalarField, dealiased_product, inverse, load_field,
                          read_msqg, save_field, sobolev_norm, transform, write_msqg)


def brute_dft(values, L):
    n = values.shape[0]
    dx = L / n
    idx = np.fft.fftfreq(n, 1.0 / n)
    x = np.arange(n) * dx
    out = np.zeros((n, n), complex)
    for a, ka in enumerate(idx):
        for b, kb in enumerate(idx):
            phase = np.exp(-2j * np.pi * (ka * x[:, None] + kb * x[None, :]) / L)
            out[a, b] = np.sum(values * phase) * dx * dx
    return out


def random_real(lat, seed=0):
    return np.random.default_rng(seed).standard_normal((lat.n, lat.n))


def test_lattice_invariants():
    lat = Lattice(16, 2.0)
    assert lat.xi.shape == (2, 16, 16)
    assert lat.xi_abs.size == 16 * 16
    neg = lat.negate_index(lat.xi[0])
    off_nyq = np.abs(lat.index) < 8
    assert np.array_equal(neg[off_nyq][:, off_nyq], -lat.xi[0][off_nyq][:, off_nyq])
    for bad in (6, 7, 9.5):
        with pytest.raises(ConfigurationError):
            Lattice(bad)


def test_dft_matches_brute_force_8x8():
    lat = Lattice(8, 1.3)
    v = random_real(lat, 3)
    assert np.max(np.abs(transform(v, lat).coeffs - brute_dft(v, 1.3))) < 1e-12 * np.max(np.abs(v))


def test_round_trip_and_parseval():
    lat = Lattice(32, 3.0)
    v = random_real(lat, 1)
    f = transform(v, lat)
    assert np.max(np.abs(inverse(f) - v)) < 1e-12 * np.max(np.abs(v))
    phys = np.sum(v**2) * lat.dx**2
    spec = lat.mode_weight * np.sum(np.abs(f.coeffs) ** 2)
    assert abs(phys - spec) < 1e-12 * phys
    assert f.hermitian_defect() < 1e-14


def test_constant_and_cosine_modes():
    lat = Lattice(16, 2.0)
    c = transform(np.ones((16, 16)), lat).coeffs.copy()
    assert abs(c[0, 0] - 4.0) < 1e-12
    c[0, 0] = 0
    assert np.max(np.abs(c)) < 1e-12
    x = lat.grid[0]
    c = transform(np.cos(2 * np.pi * x / 2.0), lat).coeffs
    nz = np.argwhere(np.abs(c) > 1e-10)
    assert sorted(map(tuple, nz)) == [(1, 0), (15, 0)]
    assert np.allclose(c[1, 0], 2.0) and np.allclose(c[15, 0], 2.0)


def test_transform_errors():
    lat = Lattice(8)
    with pytest.raises(ConfigurationError):
        transform(np.zeros((8, 9)), lat)
    v = np.zeros((8, 8))
    v[1, 1] = np.nan
    with pytest.raises(DataError):
        transform(v, lat)


def test_norms_zero_and_single_mode():
    lat = Lattice(16, 2.0)
    z = SpectralScalarField.zeros(lat)
    for kind, s in (("homogeneous", -1.0), ("inhomogeneous", 0.5)):
        assert sobolev_norm(z, kind, s) == 0.0
    assert sobolev_norm(z, "mixed_tilde", beta=1.5) == 0.0
    c = np.zeros((16, 16), complex)
    a = 0.7
    c[1, 0] = a
    f = SpectralScalarField(lat, c)
    # one mode at |xi| = 1/L, weight 1/L^2
    s = -0.85
    expected = np.sqrt((1 / 2.0) ** 2 * a**2 * (1 / 2.0) ** (2 * s))
    assert abs(f.norm("homogeneous", s) - expected) < 1e-14


def test_homogeneous_negative_norm_needs_mean_zero():
    lat = Lattice(8)
    with pytest.raises(DomainError):
        transform(np.ones((8, 8)), lat).norm("homogeneous", -0.5)


def test_mixed_norm_identity_with_exact_velocity():
    lat = Lattice(32, 1.0)
    beta = 1.6
    f = transform(random_real(lat, 4), lat)
    f = SpectralScalarField(lat, np.where(lat.xi_abs > 0, f.coeffs, 0))
    u = velocity_from_scalar(f, KernelSet(beta, 0.1, lat), mode="exact")
    lhs = np.sqrt(sum(sobolev_norm(comp, "inhomogeneous", -5 + beta) ** 2 for comp in (u.x, u.y)))
    rhs = (2 * np.pi) ** (1 - beta) * f.norm("mixed_tilde", beta=beta)
    assert abs(lhs - rhs) < 1e-10 * rhs


def test_norm_monotone_in_order():
    lat = Lattice(16, 1.0)
    f = transform(random_real(lat, 5), lat)
    assert f.norm("inhomogeneous", -1.0) <= f.norm("inhomogeneous", 0.0) <= f.norm("inhomogeneous", 0.5)


def band_limited(lat, seed):
    f = transform(random_real(lat, seed), lat)
    return SpectralScalarField(lat, np.where(lat.dealias_mask, f.coeffs, 0))


def test_dealiased_product_matches_physical_oracle_16x16():
    lat = Lattice(16, 1.0)
    f, g = band_limited(lat, 6), band_limited(lat, 7)
    prod = dealiased_product(f, g)
    # oracle: exact product on a grid fine enough to hold every product mode, then truncate
    fine = Lattice(64, 1.0)
    pad = np.zeros((64, 64), complex)

    def upsample(h):
        out = pad.copy()
        i = lat.index % 64
        out[np.ix_(i, i)] = h.coeffs
        return SpectralScalarField(fine, out)

    exact = transform(upsample(f).to_physical() * upsample(g).to_physical(), fine).coeffs
    i = lat.index % 64
    oracle = np.where(lat.dealias_mask, exact[np.ix_(i, i)], 0)
    assert np.max(np.abs(prod.coeffs - oracle)) < 1e-12 * np.max(np.abs(oracle))
    assert prod.hermitian_defect() < 1e-12


def test_dealiased_product_trivial_cases():
    lat = Lattice(16, 1.0)
    z = SpectralScalarField.zeros(lat)
    assert np.all(dealiased_product(z, band_limited(lat, 1)).coeffs == 0)
    x = lat.grid[0]
    f = transform(np.cos(2 * np.pi * x), lat)
    p = dealiased_product(f, f).to_physical()
    assert np.max(np.abs(p - (0.5 + 0.5 * np.cos(4 * np.pi * x)))) < 1e-12


def test_binary_round_trip_bit_exact(tmp_path):
    lat = Lattice(16, 2.5)
    f = transform(random_real(lat, 8), lat)
    path = tmp_path / "f.msqg"
    save_field(path, f)
    raw = path.read_bytes()
    assert raw[:4] == b"MSQG" and len(raw) == 4 + 4 + 8 + 16 * 256
    g = load_field(path)
    assert g.lattice == lat
    assert np.array_equal(g.coeffs.view(np.uint8), f.coeffs.view(np.uint8))
    write_msqg(path, g.coeffs, 2.5)
    assert path.read_bytes() == raw


def test_binary_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.msqg"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(DataError):
        read_msqg(path)
