import csv

import numpy as np
import pytest

from msqg.errors import ConfigurationError, DomainError, ParameterRangeWarning
from msqg.kernels import KernelSet
from msqg.lattice import Lattice
from msqg.solver import SolverConfig, prepare_initial_data
from msqg.uniqueness import (PERTURBATIONS, difference_quadratic_form, gronwall_fit, i1_bound_sweep,
                             i2_exact, i_terms, noise_ablation, paired_run, perturbation,
                             uniqueness_range_violations)

CFG = SolverConfig(n=32, box_length=4.0, alpha=0.28, beta=1.7, p=1.8, delta=0.2, dt=2e-4,
                   t_end=0.01, ensemble_size=2, seed=5)


def two_fields(cfg=CFG, seeds=(1, 2)):
    return [prepare_initial_data({"kind": "random_band", "seed": s, "bands": [(0.5, 3.0)]},
                                 cfg.delta, cfg.lattice) for s in seeds]


def test_parameters_in_range():
    assert uniqueness_range_violations(CFG.alpha, CFG.beta, CFG.p) == []
    assert uniqueness_range_violations(0.3, 1.4, 1.8)


def test_zero_perturbation_gives_identical_paths():
    run_ = paired_run(CFG, 0.0)
    assert np.all(run_.ledger.column("D") == 0)
    a, b = run_.snapshot(CFG.t_end, pair=1)
    assert np.array_equal(a.coeffs, b.coeffs)
    rep = gronwall_fit(run_, min_pairs=2)
    assert rep.status == "WARN" and "trivially unique" in rep.warning


def test_difference_scales_quadratically_with_epsilon():
    d1 = paired_run(CFG, 1e-4).ledger.column("D")[:, -1]
    d2 = paired_run(CFG, 2e-4).ledger.column("D")[:, -1]
    assert np.all(np.abs(d2 / d1 / 4 - 1) < 0.2)


def test_members_share_noise_and_pairs_do_not():
    run_ = paired_run(CFG, 1e-3, pairs=3)
    dig = run_.result.increments_digest
    assert run_.digests_match and len(dig) == 6
    assert len({dig[0], dig[2], dig[4]}) == 3


def test_ablation_returns_noisy_and_quiet_ledgers():
    noisy, quiet = noise_ablation(CFG, 1e-3)
    assert noisy.config.noise_on and not quiet.config.noise_on
    assert noisy.ledger.column("D").shape == quiet.ledger.column("D").shape
    assert not np.array_equal(noisy.ledger.column("D"), quiet.ledger.column("D"))
    assert quiet.result.increments_digest == []


def test_perturbations_normalized():
    lat = CFG.lattice
    for kind in PERTURBATIONS:
        f = perturbation(kind, lat, CFG.beta, CFG.delta)
        assert abs(f.norm("homogeneous", -CFG.beta / 2) - 1) < 1e-12
        assert f.coeffs[0, 0] == 0
    with pytest.raises(ConfigurationError):
        perturbation("nope", lat, CFG.beta, CFG.delta)


def test_exact_kernel_i2_cancels():
    th1, th2 = two_fields()
    ks = KernelSet(CFG.beta, CFG.delta, CFG.lattice)
    theta = th1 - th2
    scale = theta.norm("inhomogeneous", 0.0) ** 2 * th2.norm("inhomogeneous", 0.0)
    assert abs(i2_exact(theta, th2, ks)) < 1e-8 * scale


def test_swap_symmetry():
    th1, th2 = two_fields()
    a = i_terms(th1, th2, CFG)
    b = i_terms(th2, th1, CFG)
    assert abs(a[2] - b[2]) <= 1e-14 * abs(a[2])
    # I1 + I2 only depends on the pair through theta and the symmetric split
    assert abs((a[0] + a[1]) - (b[0] + b[1])) < 1e-10 * (abs(a[0]) + abs(a[1]))


def test_J_equals_certificate_quadratic_form():
    th1, th2 = two_fields()
    _, _, J = i_terms(th1, th2, CFG)
    assert abs(J - difference_quadratic_form(th1 - th2, CFG)) < 1e-12 * abs(J)


def test_i1_sweep_constant_finite():
    C, ratios, pt, eps = i1_bound_sweep(CFG, count=10)
    assert np.isfinite(C) and C > 0 and ratios.shape == (10,)
    assert eps > 0 and pt > 1


def test_snapshot_and_csv(tmp_path):
    run_ = paired_run(CFG, 1e-3, snapshot_every=10)
    with pytest.raises(DomainError):
        run_.snapshot(0.123)
    path = tmp_path / "d.csv"
    run_.ledger.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["pair", "time", "D", "H_diff", "I1", "I2", "J"]
    assert len(rows) == 1 + 2 * (CFG.steps + 1)


def test_gronwall_guards():
    run_ = paired_run(CFG, 1e-3)
    with pytest.raises(ConfigurationError):
        gronwall_fit(run_)
    rep = gronwall_fit(run_, min_pairs=2)
    assert "no refined run" in rep.warning and np.isfinite(rep.constants["C"])
    with pytest.raises(ConfigurationError):
        paired_run(CFG, -1.0)
    with pytest.warns(ParameterRangeWarning):
        paired_run(CFG.replace(alpha=0.4), 1e-3, pairs=1)
