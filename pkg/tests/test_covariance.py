import mpmath
import numpy as np
import pytest
from scipy import integrate

from msqg.covariance import (CovarianceModel, QuadratureSpec, c_delta_continuum, chi,
                             covariance_real, mollifier_hat, sample_noise_increment,
                             spectrum_at, stream_seed, structure_continuum, structure_functions)
from msqg.errors import ConfigurationError, DomainError
from msqg.lattice import Lattice


def test_spectrum_matrix_projector():
    xi = np.array([0.7, -1.3])
    m = spectrum_at(xi, 0.4, 0.1)
    assert np.max(np.abs(m @ xi)) < 1e-15 * np.max(np.abs(m))
    g = (1 + xi @ xi) ** (-1.4) * chi(0.1 * np.sqrt(xi @ xi)) ** 2
    assert abs(np.trace(m) - g) < 1e-15
    assert np.all(spectrum_at(np.array([0.0, 0.0]), 0.4, 0.1) == 0)
    assert np.all(spectrum_at(np.array([20.0, 0.1]), 0.4, 0.1) == 0)


def test_mollifier_profile():
    assert mollifier_hat(0.0, 0.2) == 1.0
    assert mollifier_hat(3 / 0.2, 0.2) == 0.0
    v = mollifier_hat(1.5 / 0.2, 0.2)
    f = lambda s: mpmath.e ** (-1 / s)
    ref = f(mpmath.mpf("0.5")) / (f(mpmath.mpf("0.5")) + f(mpmath.mpf("0.5")))
    assert abs(v - float(ref)) < 1e-15
    r = 1.3
    f13 = f(mpmath.mpf(2) - mpmath.mpf("1.3")) / (f(mpmath.mpf(2) - mpmath.mpf("1.3")) + f(mpmath.mpf("1.3") - 1))
    assert abs(chi(r) - float(f13)) < 1e-15
    r = np.linspace(1.0, 2.0, 101)
    assert np.all(np.diff(chi(r)) <= 0) and chi(1.0) == 1.0 and chi(2.0) == 0.0
    with pytest.raises(DomainError):
        mollifier_hat(-1.0, 0.5)


def c_delta_oracle(alpha, delta):
    f = lambda r: np.pi * r * (1 + r * r) ** (-1 - alpha) * chi(delta * r) ** 2
    pts = [0, 1, 10, 100, 1 / delta, 2 / delta]
    pts = sorted(p for p in set(pts) if p <= 2 / delta)
    return sum(integrate.quad(f, a, b, epsabs=0, epsrel=1e-13, limit=400)[0] for a, b in zip(pts[:-1], pts[1:]))


@pytest.mark.parametrize("alpha,delta", [(0.5, 1e-3), (0.3, 0.1), (0.7, 0.01)])
def test_c_delta_against_independent_quadrature(alpha, delta):
    assert abs(c_delta_continuum(alpha, delta) - c_delta_oracle(alpha, delta)) < 1e-9 * c_delta_oracle(alpha, delta)


def test_c_delta_limit_and_monotone():
    assert abs(c_delta_continuum(0.5, 1e-3) / np.pi - 1) < 0.01
    assert c_delta_continuum(0.4, 1.0) < c_delta_continuum(0.4, 0.1) < np.pi / 0.8
    fine = c_delta_continuum(0.5, 1e-3, QuadratureSpec(panels=64))
    assert abs(fine - c_delta_continuum(0.5, 1e-3)) < 1e-10
    with pytest.raises(ConfigurationError):
        c_delta_continuum(0.5, 0.1, QuadratureSpec(cutoff=5.0))


def test_covariance_origin_and_symmetry():
    model = CovarianceModel(0.4, 0.2, Lattice(32, 4.0))
    q0 = covariance_real(np.zeros(2), model)
    assert np.allclose(q0, model.c_delta_lattice * np.eye(2), atol=1e-13, rtol=0)
    x = np.array([0.37, -0.81])
    q, qm = covariance_real(x, model), covariance_real(-x, model)
    assert np.allclose(q, q.T, atol=1e-15) and np.allclose(q, qm, atol=1e-14)


def test_block_covariance_positive_semidefinite():
    model = CovarianceModel(0.3, 0.2, Lattice(32, 4.0))
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.uniform(0, 4, 2), rng.uniform(0, 4, 2)
        q0, qxy, qyx = (covariance_real(p, model) for p in (np.zeros(2), x - y, y - x))
        block = np.block([[q0, qxy], [qyx, q0]])
        assert np.linalg.eigvalsh(block).min() > -1e-10


def test_structure_ratio_and_exponent():
    model = CovarianceModel(0.25, 1 / 256, Lattice(512, 0.5))
    rep = structure_functions(model)
    assert abs(rep.ratio / 1.5 - 1) < 0.1
    model = CovarianceModel(0.4, 1 / 256, Lattice(512, 0.5))
    rep = structure_functions(model)
    assert abs(rep.slope_L - 0.8) < 0.1
    assert rep.B_L_values[0] < rep.origin_value and rep.B_N_values[0] < rep.origin_value


def test_structure_insufficient_range():
    with pytest.raises(ConfigurationError):
        structure_functions(CovarianceModel(0.3, 0.2, Lattice(16, 1.0)))


def test_structure_continuum_small_r():
    bl, bn = structure_continuum(np.array([1e-5, 1e-4]), 0.3)
    assert np.all(bl < np.pi / 0.6) and np.all(bn < bl)


def test_noise_divergence_free_and_cutoff():
    lat = Lattice(32, 4.0)
    model = CovarianceModel(0.3, 0.5, lat)
    w, rng = sample_noise_increment(model, 0.01, 3)
    assert w.divergence_defect() < 1e-15 * np.max(np.abs(w.coeffs))
    assert np.all(w.coeffs[:, lat.xi_abs >= 2 / 0.5] == 0)
    w2, _ = sample_noise_increment(model, 0.01, 3)
    assert np.array_equal(w.coeffs, w2.coeffs)
    with pytest.raises(DomainError):
        sample_noise_increment(model, 0.0, 1)


def test_noise_monte_carlo_moments():
    lat = Lattice(16, 4.0)
    model = CovarianceModel(0.3, 0.5, lat)
    dt = 0.01
    rng = np.random.default_rng(11)
    m = 10_000
    vals = np.empty((m, 2))
    for i in range(m):
        w, rng = sample_noise_increment(model, dt, rng)
        vals[i] = w.to_physical()[:, 3, 5]
    sd = np.sqrt(model.c_delta_lattice * dt)
    assert np.all(np.abs(vals.mean(axis=0)) < 4 * sd / np.sqrt(m))
    e = np.sum(vals**2, axis=1) / dt
    assert abs(e.mean() - 2 * model.c_delta_lattice) < 3 * e.std() / np.sqrt(m)


def test_stream_seed_rule():
    assert stream_seed(12, 5) == 12 ^ 5
