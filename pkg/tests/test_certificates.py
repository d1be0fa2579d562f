import csv
import json

import numpy as np
import pytest

from msqg.certificates import (CertificateReport, RadialTrace, budget_constant, certify_noise_multiplier,
                               decompose_trace_symbol, energy_balance, noise_mode_sum, noise_multiplier,
                               quadratic_form, regularity_budget, trace_form_double_sum, trace_symbol)
from msqg.covariance import CovarianceModel, ito_multiplier
from msqg.errors import ConfigurationError, DomainError
from msqg.kernels import KernelSet
from msqg.lattice import Lattice, SpectralScalarField, transform
from msqg.solver import SolverConfig, prepare_initial_data, run


def test_pieces_sum_to_full_kernel():
    rt = RadialTrace(0.4, 1.6, 0.1)
    R = np.geomspace(1e-3, 5.0, 1000)
    p = rt.pieces(R)
    total = p["A"] + p["R1"] + p["R2"] + p["R3"]
    assert np.max(np.abs(total - p["full"]) / np.abs(p["full"]).max()) < 1e-10
    with pytest.raises(DomainError):
        rt.pieces([0.0, 1.0])


def test_only_far_piece_survives_beyond_cutoff():
    p = RadialTrace(0.3, 1.7, 0.2).pieces(np.array([2.0, 2.5, 7.0]))
    for k in ("A", "R1", "R2"):
        assert np.all(p[k] == 0)
    assert np.array_equal(p["R3"], p["full"])


def test_A_matches_leading_power_near_origin():
    rt = RadialTrace(0.4, 1.6, 0.1)
    R = np.array([1e-5, 1e-6])
    ratio = rt.A_exact(R) / (rt.A_leading * R**rt.singular_exponent)
    assert np.all(np.abs(ratio - 1) < 1e-2)


def test_lattice_decomposition_sum_defect():
    lat = Lattice(32, 4.0)
    dec = decompose_trace_symbol(CovarianceModel(0.4, 0.2, lat), KernelSet(1.6, 0.2, lat))
    assert np.isnan(dec.A[0, 0]) and dec.sum_defect() < 1e-12
    with pytest.raises(ConfigurationError):
        decompose_trace_symbol(CovarianceModel(0.4, 0.2, lat), KernelSet(1.6, 0.1, lat))


def test_trace_symbol_matches_physical_double_sum_16x16():
    lat = Lattice(16, 2.0)
    cov, ks = CovarianceModel(0.3, 0.25, lat), KernelSet(1.7, 0.25, lat)
    th = transform(np.random.default_rng(0).standard_normal((16, 16)), lat)
    th = SpectralScalarField(lat, np.where(lat.xi_abs > 0, th.coeffs, 0))
    spectral = quadratic_form(trace_symbol(cov, ks, kind="full"), th)
    brute = trace_form_double_sum(th, cov, ks)
    assert abs(spectral - brute) < 1e-8 * abs(brute)


def test_galerkin_symbol_is_full_symbol_inside_safe_band():
    lat = Lattice(64, 2.0)
    cov, ks = CovarianceModel(0.3, 0.5, lat), KernelSet(1.7, 0.5, lat)
    full = trace_symbol(cov, ks, kind="full")
    gal = trace_symbol(cov, ks, kind="galerkin")
    # xi + supp(g) stays in the 2/3 band when |xi|_inf + 2/delta < cutoff / L
    cut = (lat.n - 1) // 3 / lat.box_length
    safe = np.maximum(np.abs(lat.xi[0]), np.abs(lat.xi[1])) + 2 / 0.5 < cut
    assert safe.any()
    assert np.max(np.abs(full[safe] - gal[safe])) < 1e-12 * np.max(np.abs(full))
    assert np.all(gal[~lat.dealias_mask] == 0)


def test_noise_multiplier_single_mode_oracle():
    lat = Lattice(32, 4.0)
    cov = CovarianceModel(0.3, 0.5, lat)
    psi = noise_multiplier(cov)
    g = cov.spectrum
    xi = lat.xi
    for i, j in ((1, 0), (3, 5), (7, 30)):
        oracle = lat.mode_weight * np.sum(g * (1 + (xi[0, i, j] - xi[0]) ** 2 + (xi[1, i, j] - xi[1]) ** 2) ** -3)
        assert abs(psi[i, j] - oracle) < 1e-12 * oracle
        c = np.zeros((32, 32), complex)
        c[i, j] = 0.3 + 0.4j
        c[(-i) % 32, (-j) % 32] = 0.3 - 0.4j
        f = SpectralScalarField(lat, c)
        lhs, rhs = noise_mode_sum(cov, f), quadratic_form(psi, f)
        assert abs(lhs - rhs) < 1e-12 * rhs


def test_noise_multiplier_certificate_and_report_io(tmp_path):
    lat = Lattice(64, 1.0)
    cov = CovarianceModel(0.3, 0.02, lat)
    f = prepare_initial_data({"kind": "random_band", "bands": [(1.0, 3.0)]}, 0.02, lat)
    rep = certify_noise_multiplier(cov, fields=[f])
    assert rep.status == "PASS", rep.witness
    rep.to_json(tmp_path / "r.json")
    back = json.load(open(tmp_path / "r.json"))
    assert back["status"] == "PASS" and back["name"] == "noise_multiplier"
    rep.to_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0][:3] == ["bin_lo", "bin_hi", "center"] and len(rows) > 5
    with pytest.raises(ConfigurationError):
        CertificateReport("empty", True).to_csv(tmp_path / "e.csv")


def test_report_status():
    assert CertificateReport("x", True).status == "PASS"
    assert CertificateReport("x", True, warning="thin").status == "WARN"
    assert CertificateReport("x", False).status == "FAIL"


def test_diffusion_only_balance_closed_form():
    cfg = SolverConfig(n=32, box_length=4.0, delta=0.2, dt=1e-3, t_end=0.05, noise_on=False,
                       nonlinear=False)
    th0 = prepare_initial_data(cfg.initial, cfg.delta, cfg.lattice)
    res = run(cfg, theta0=th0)
    lat = cfg.lattice
    m = ito_multiplier(CovarianceModel(cfg.alpha, cfg.delta, lat, dealias=True))
    G = KernelSet(cfg.beta, cfg.delta, lat).green_reg
    t = res.ledger.times
    w = np.abs(th0.coeffs) ** 2 * lat.mode_weight
    q = np.array([np.sum(G * w * np.exp(-m * s)) for s in t])
    J = np.array([-np.sum(m * G * w * np.exp(-m * s)) for s in t])
    assert np.max(np.abs(res.ledger.column("quad_form")[0] - q)) < 1e-10 * q[0]
    assert np.max(np.abs(res.ledger.column("trace_term")[0] - J)) < 1e-10 * abs(J[0])


def test_energy_balance_small_ensemble_warns():
    cfg = SolverConfig(n=32, box_length=4.0, delta=0.2, dt=1e-4, t_end=0.02, ensemble_size=8)
    rep = energy_balance(run(cfg), times=(0.01, 0.02))
    assert "below 32" in rep.warning and "no refined run" in rep.warning
    assert rep.status in ("WARN", "FAIL")
    with pytest.raises(ConfigurationError):
        energy_balance(run(cfg), times=(0.5,))


def test_budget_for_zero_data():
    cfg = SolverConfig(n=32, box_length=4.0, delta=0.2, dt=1e-3, t_end=0.01, ensemble_size=2)
    res = run(cfg, theta0=SpectralScalarField.zeros(cfg.lattice))
    assert budget_constant(res.ledger) == (0.0, 0.0, 0.0)
    rep = regularity_budget({0.2: res})
    assert rep.passed and rep.constants["spread"] == 1.0


def test_budget_constant_at_least_one():
    cfg = SolverConfig(n=32, box_length=4.0, delta=0.2, dt=1e-4, t_end=0.01, ensemble_size=4)
    C, sup_part, int_part = budget_constant(run(cfg).ledger)
    assert sup_part >= 1.0 and int_part > 0 and C == pytest.approx(sup_part + int_part)
