import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from msqg.errors import ConfigurationError
from msqg.estimators import BandLimiter, PowerLawFit, SobolevNormTransformer
from msqg.lattice import Lattice, SpectralScalarField


def fields(count=3, n=16, seed=0):
    return np.random.default_rng(seed).standard_normal((count, n, n))


def test_sobolev_transformer_matches_field_norm():
    X = fields()
    tr = SobolevNormTransformer(s=-0.5, box_length=2.0).fit(X)
    out = tr.transform(X.reshape(3, -1))
    lat = Lattice(16, 2.0)
    expected = [SpectralScalarField.from_physical(x, lat).norm("inhomogeneous", -0.5) for x in X]
    assert out.shape == (3, 1) and np.allclose(out[:, 0], expected, rtol=1e-14)
    with pytest.raises(ConfigurationError):
        tr.transform(fields(n=8))


def test_band_limiter_idempotent_and_mean_free():
    X = fields()
    bl = BandLimiter(delta=0.25, box_length=2.0)
    once = bl.fit_transform(X)
    twice = bl.transform(once)
    assert np.allclose(once, twice, atol=1e-13)
    assert np.allclose(once.mean(axis=1), 0, atol=1e-13)
    with pytest.raises(ConfigurationError):
        BandLimiter(delta=1.5).fit(X)


def test_pipeline_and_clone():
    pipe = make_pipeline(BandLimiter(delta=0.25, box_length=2.0),
                         SobolevNormTransformer(s=0.0, box_length=2.0))
    out = pipe.fit_transform(fields())
    assert out.shape == (3, 1) and np.all(out > 0)
    c = clone(SobolevNormTransformer(s=1.0, kind="homogeneous"))
    assert c.get_params()["s"] == 1.0
    with pytest.raises(NotFittedError):
        c.transform(fields())


def test_power_law_fit_recovers_exponent():
    x = np.geomspace(1, 100, 50)
    y = 3.0 * x**-2.6
    fit = PowerLawFit().fit(x, y)
    assert fit.exponent_ == pytest.approx(-2.6, abs=1e-12)
    assert fit.amplitude_ == pytest.approx(3.0, rel=1e-12)
    assert fit.score(x, y) == pytest.approx(1.0)
    br = PowerLawFit(bracket=True, window=(10, 100)).fit(x, 2.0 * (1 + x**2) ** -1.3)
    assert br.exponent_ == pytest.approx(-2.6, abs=1e-12)
    with pytest.raises(ConfigurationError):
        PowerLawFit(window=(1000, 2000)).fit(x, y)
