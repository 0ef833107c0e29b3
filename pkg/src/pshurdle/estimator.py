"""scikit-learn style wrapper around :func:`pshurdle.laplace.fit`."""

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .data import Dataset
from .exceptions import InvalidArgumentError
from .grid import build_grid, projection_matrix
from .laplace import FitConfig, fit
from .metrics import predict_fields


class PreferentialHurdleModel(RegressorMixin, BaseEstimator):
    """Zero-inflated biomass regression with preferential sampling.

    ``X`` holds point coordinates and ``y`` the observed biomass (zero where
    the species was absent).  Rows flagged as fishery-dependent through
    ``source`` feed the sampling layer of the joint model.

    Parameters
    ----------
    model : {"joint", "fid", "fdd"}
    grid_shape : tuple of int
        Nodes per axis of the latent lattice.
    bounds : tuple, optional
        ``(x_min, x_max, y_min, y_max)``; defaults to the unit square when
        the data fit inside it, else to the padded bounding box.
    curvature : {"expected", "observed"}
    inner_tol, outer_tol, outer_max_iter : float, float, int
        Passed to :class:`~pshurdle.laplace.FitConfig`.
    std_errors : bool
        Compute standard errors from the outer Hessian.

    Attributes
    ----------
    result_ : FitResult
    grid_ : GridSpec
    """

    def __init__(self, model="joint", grid_shape=(60, 60), bounds=None, curvature="expected",
                 inner_tol=1e-8, outer_tol=1e-6, outer_max_iter=500, std_errors=False):
        self.model = model
        self.grid_shape = grid_shape
        self.bounds = bounds
        self.curvature = curvature
        self.inner_tol = inner_tol
        self.outer_tol = outer_tol
        self.outer_max_iter = outer_max_iter
        self.std_errors = std_errors

    def _resolve_bounds(self, X):
        if self.bounds is not None:
            return tuple(float(b) for b in self.bounds)
        if np.all(X >= 0) and np.all(X <= 1):
            return (0.0, 1.0, 0.0, 1.0)
        lo, hi = X.min(axis=0), X.max(axis=0)
        pad = 0.05 * np.maximum(hi - lo, 1e-12)
        return (lo[0] - pad[0], hi[0] + pad[0], lo[1] - pad[1], hi[1] + pad[1])

    def fit(self, X, y, source=None, vessel_id=None):
        """Fit the model.

        Parameters
        ----------
        X : array-like, shape (n, 2)
        y : array-like, shape (n,)
            Nonnegative biomass; zero means absence.
        source : array-like of {"FID", "FDD"} or bool, optional
            Defaults to all survey rows.
        vessel_id : array-like of int, optional
        """
        X = check_array(X, dtype=float)
        y = check_array(y, ensure_2d=False, dtype=float)
        if X.shape[1] != 2:
            raise InvalidArgumentError("X must have two columns (coordinates)")
        check_consistent_length(X, y)
        if np.any(y < 0):
            raise InvalidArgumentError("biomass must be nonnegative")
        if source is not None:
            check_consistent_length(X, source)
        z = (y > 0).astype(np.int8)
        data = Dataset.from_arrays(X, z, np.where(z == 1, y, np.nan), source, vessel_id)
        self.grid_ = build_grid(int(self.grid_shape[0]), int(self.grid_shape[1]), self._resolve_bounds(X))
        cfg = FitConfig(inner_tol=self.inner_tol, outer_tol=self.outer_tol,
                        outer_max_iter=self.outer_max_iter, curvature=self.curvature,
                        std_errors=self.std_errors)
        self.result_ = fit(data, self.grid_, cfg, model=self.model)
        self.n_features_in_ = 2
        return self

    def _linear_predictors(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=float)
        if X.shape[1] != 2:
            raise InvalidArgumentError("X must have two columns (coordinates)")
        a = projection_matrix(self.grid_, X)
        th = self.result_.theta_hat
        modes = self.result_.latent_modes
        return th.alpha_prime + a @ modes.v, th.alpha + a @ modes.u

    def predict_proba_presence(self, X):
        return expit(self._linear_predictors(X)[0])

    def predict(self, X):
        """Expected biomass ``pi * mu`` at the given locations."""
        eta_z, eta_y = self._linear_predictors(X)
        return expit(eta_z) * np.exp(eta_y)

    def predict_fields(self):
        """Predicted surfaces on the fitted lattice."""
        check_is_fitted(self, "result_")
        return predict_fields(self.result_, self.grid_)
