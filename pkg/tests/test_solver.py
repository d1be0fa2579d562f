import csv

import numpy as np
import pytest

from msqg.covariance import CovarianceModel, ito_multiplier
from msqg.errors import ConfigurationError, ParameterRangeWarning, StepRejected
from msqg.lattice import Lattice, SpectralScalarField, transform
from msqg.solver import (SolverConfig, ensemble, initial_state, prepare_initial_data, run, step,
                         truncate)

BASE = dict(n=32, box_length=4.0, alpha=0.3, beta=1.7, delta=0.2, dt=1e-3, t_end=0.02,
            ensemble_size=2, seed=3)


def config(**kw):
    return SolverConfig(**{**BASE, **kw})


def test_zero_is_absorbing():
    cfg = config()
    res = run(cfg, theta0=SpectralScalarField.zeros(cfg.lattice))
    assert all(np.all(f == 0) for f in res.final)
    assert np.all(res.ledger.column("l2") == 0)


def test_diffusion_only_matches_per_mode_decay():
    cfg = config(noise_on=False, nonlinear=False, t_end=0.05)
    th0 = prepare_initial_data(cfg.initial, cfg.delta, cfg.lattice)
    res = run(cfg, theta0=th0)
    m = ito_multiplier(CovarianceModel(cfg.alpha, cfg.delta, cfg.lattice, dealias=True))
    expected = th0.coeffs * np.exp(-0.5 * m * cfg.steps * cfg.dt)
    scale = np.max(np.abs(th0.coeffs))
    assert np.max(np.abs(res.final[0] - expected)) < 1e-12 * scale


def _shear_error(dt):
    # theta0 = sin(2 pi y) in u = -A cos(2 pi x) e_y has theta(t) = sin(2 pi (y + A t cos 2 pi x))
    lat = Lattice(64, 1.0)
    amp, t_end = 0.5, 0.1
    cfg = SolverConfig(n=64, box_length=1.0, delta=0.1, dt=dt, t_end=t_end, noise_on=False,
                       nonlinear=False, diffusion_on=False, drift_mode=(1, 0, amp))
    x, y = lat.grid
    th0 = transform(np.sin(2 * np.pi * y), lat)
    res = run(cfg, theta0=th0)
    exact = np.sin(2 * np.pi * (y + amp * t_end * np.cos(2 * np.pi * x)))
    return np.max(np.abs(res.final_field().to_physical() - exact))


def test_transport_matches_characteristics_first_order():
    errs = [_shear_error(dt) for dt in (4e-3, 2e-3, 1e-3)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 0.9), (errs, orders)


def _l2_drift(amplitude, dt=1e-4):
    cfg = config(noise_on=False, diffusion_on=False, dt=dt, t_end=0.1, ensemble_size=1,
                 initial={"kind": "random_band", "amplitude": amplitude, "seed": 1})
    return run(cfg).ledger.l2_mean_drift()


def test_advection_conserves_l2_up_to_time_step():
    small = _l2_drift(0.05)
    assert 0 <= small < 1e-6
    # each explicit step adds dt^2 |u.grad theta|^2, so the relative drift is quadratic in amplitude
    assert abs(_l2_drift(0.1) / small / 4 - 1) < 0.05
    assert abs(_l2_drift(0.05, dt=5e-5) / small * 2 - 1) < 0.05


def test_noise_l2_drift_is_first_order_in_dt():
    cfg = config(nonlinear=False, t_end=0.02, ensemble_size=32, seed=1)
    drifts = [run(cfg.replace(dt=dt)).ledger.l2_mean_drift() for dt in (1e-4, 5e-5)]
    assert drifts[0] < 0 and drifts[1] < 0
    assert 1.5 < drifts[0] / drifts[1] < 2.5


def test_initial_data_truncation():
    lat = Lattice(64, 4.0)
    spec = {"kind": "random_band", "bands": [(0.5, 6.0)], "seed": 2}
    th, gap = prepare_initial_data(spec, 0.25, lat, beta=1.7)
    assert th.coeffs[0, 0] == 0
    assert np.all(th.coeffs[lat.xi_abs > 4.0] == 0)
    assert np.array_equal(truncate(th, 0.25).coeffs, th.coeffs)
    gaps = [prepare_initial_data(spec, d, lat, beta=1.7)[1] for d in (0.5, 0.25, 0.2)]
    assert gaps[0] > gaps[1] > gaps[2] >= 0
    with pytest.raises(ConfigurationError):
        prepare_initial_data({"kind": "nope"}, 0.2, lat)


def test_runs_are_deterministic_and_split_invariant():
    cfg = config(ensemble_size=4)
    a, b = run(cfg), run(cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.final, b.final))
    assert a.increments_digest == b.increments_digest
    c = ensemble(cfg, workers=2)
    assert all(np.array_equal(x, y) for x, y in zip(a.final, c.final))
    assert np.array_equal(a.ledger.column("lp"), c.ledger.column("lp"))
    d = run(cfg.replace(seed=4))
    assert not np.array_equal(a.final[0], d.final[0])


def test_single_step_matches_run():
    cfg = config(ensemble_size=1, t_end=1e-3)
    st = step(initial_state(cfg), cfg)
    res = run(cfg)
    assert np.array_equal(st.theta.coeffs, res.final[0])
    assert st.time == cfg.dt


def test_cfl_rejection():
    cfg = config(dt=0.5, t_end=1.0, initial={"kind": "random_band", "amplitude": 50.0})
    res = run(cfg)
    assert not res.completed and isinstance(res.error, StepRejected)
    assert 0 < res.error.suggested_dt < 0.5
    with pytest.raises(StepRejected):
        step(initial_state(cfg), cfg)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        config(dt=0.0)
    with pytest.raises(ConfigurationError):
        config(noise_substeps=0)
    with pytest.raises(ConfigurationError):
        SolverConfig.from_dict({"n": 32, "bogus": 1})
    with pytest.warns(ParameterRangeWarning):
        config(alpha=0.9)
    cfg = config(drift_mode=(1, 2, 0.1))
    assert SolverConfig.from_dict(cfg.to_dict()) == cfg


def test_ledger_csv(tmp_path):
    cfg = config()
    res = run(cfg)
    path = tmp_path / "ledger.csv"
    res.ledger.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0][:4] == ["realization", "step", "time", "l1"]
    assert len(rows) == 1 + cfg.ensemble_size * (cfg.steps + 1)
    assert float(rows[-1][2]) == pytest.approx(cfg.t_end)
