"""scikit-learn style wrappers around lattice diagnostics.

Inputs are batches of physical fields shaped (samples, n, n) or flattened to
(samples, n*n); the lattice is fixed by ``box_length`` and the grid size seen in fit.
"""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ConfigurationError
from .lattice import Lattice, SpectralScalarField
from .solver import truncate


def _as_fields(X, n=None):
    X = check_array(np.asarray(X).reshape(len(X), -1), dtype=np.float64)
    side = int(round(np.sqrt(X.shape[1])))
    if side * side != X.shape[1]:
        raise ConfigurationError(f"rows of length {X.shape[1]} are not square grids")
    if n is not None and side != n:
        raise ConfigurationError(f"fitted on {n}x{n} grids, got {side}x{side}")
    return X.reshape(len(X), side, side)


class _LatticeMixin:
    def _fit_lattice(self, X):
        fields = _as_fields(X)
        self.lattice_ = Lattice(fields.shape[1], self.box_length)
        self.n_features_in_ = fields.shape[1] ** 2
        return fields


class SobolevNormTransformer(_LatticeMixin, TransformerMixin, BaseEstimator):
    """Map each field to its lattice Sobolev norm of order ``s``.

    ``kind`` is "homogeneous" or "inhomogeneous"; homogeneous norms of negative order
    require mean-zero fields.
    """

    def __init__(self, s=0.0, kind="inhomogeneous", box_length=1.0):
        self.s = s
        self.kind = kind
        self.box_length = box_length

    def fit(self, X, y=None):
        self._fit_lattice(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "lattice_")
        lat = self.lattice_
        fields = _as_fields(X, lat.n)
        out = [SpectralScalarField.from_physical(f, lat).norm(self.kind, self.s) for f in fields]
        return np.array(out)[:, None]


class BandLimiter(_LatticeMixin, TransformerMixin, BaseEstimator):
    """Project fields onto the resolved band: 2/3 rule, |xi| <= 1/delta, mean removed."""

    def __init__(self, delta=0.1, box_length=1.0):
        self.delta = delta
        self.box_length = box_length

    def fit(self, X, y=None):
        if not 0 < self.delta < 1:
            raise ConfigurationError(f"delta must lie in (0, 1), got {self.delta}")
        self._fit_lattice(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "lattice_")
        lat = self.lattice_
        fields = _as_fields(X, lat.n)
        out = [truncate(SpectralScalarField.from_physical(f, lat), self.delta).to_physical()
               for f in fields]
        return np.stack(out).reshape(len(fields), -1)


class PowerLawFit(RegressorMixin, BaseEstimator):
    """Least-squares fit of log|y| = log(amplitude) + exponent log(x) inside ``window``.

    ``bracket=True`` fits against <x> = sqrt(1 + x^2) instead of x.
    """

    def __init__(self, window=None, bracket=False):
        self.window = window
        self.bracket = bracket

    def _abscissa(self, x):
        return np.sqrt(1 + x**2) if self.bracket else x

    def fit(self, X, y):
        x = check_array(X, ensure_2d=False, dtype=np.float64).ravel()
        y = np.abs(check_array(y, ensure_2d=False, dtype=np.float64).ravel())
        sel = (x > 0) & (y > 0)
        if self.window is not None:
            lo, hi = self.window
            sel &= (x >= lo) & (x <= hi)
        if sel.sum() < 2:
            raise ConfigurationError("fewer than two positive samples inside the fit window")
        slope, intercept = np.polyfit(np.log(self._abscissa(x[sel])), np.log(y[sel]), 1)
        self.exponent_ = float(slope)
        self.amplitude_ = float(np.exp(intercept))
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "exponent_")
        x = check_array(X, ensure_2d=False, dtype=np.float64).ravel()
        return self.amplitude_ * self._abscissa(x) ** self.exponent_
