import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pshurdle import PreferentialHurdleModel
from pshurdle.exceptions import InvalidArgumentError
from pshurdle.grid import build_grid
from pshurdle.simulate import ScenarioConfig, make_scenario


@pytest.fixture(scope="module")
def xy():
    cfg = ScenarioConfig.preset(3, n_s=40, n_c=40, seed=21)
    _, data = make_scenario(cfg, build_grid(10, 10))
    y = np.where(data.z == 1, data.y, 0.0)
    source = np.where(data.is_fdd, "FDD", "FID")
    return data.locations, y, source


@pytest.fixture(scope="module")
def fitted(xy):
    X, y, source = xy
    return PreferentialHurdleModel(grid_shape=(10, 10)).fit(X, y, source=source)


def test_get_params_and_clone():
    est = PreferentialHurdleModel(model="fid", grid_shape=(8, 8), curvature="observed")
    params = est.get_params()
    assert params["model"] == "fid" and params["grid_shape"] == (8, 8)
    twin = clone(est)
    assert twin.get_params() == params
    assert not hasattr(twin, "result_")


def test_fit_predict(fitted, xy):
    X, y, _ = xy
    assert fitted.result_.converged
    assert fitted.n_features_in_ == 2
    pred = fitted.predict(X)
    assert pred.shape == (len(X),) and np.all(pred > 0)
    p = fitted.predict_proba_presence(X)
    assert np.all((p > 0) & (p < 1))
    # prediction at a lattice node equals the lattice surface there
    surf = fitted.predict_fields()
    np.testing.assert_allclose(fitted.predict(fitted.grid_.coords), surf.s_hat, rtol=1e-12)


def test_fit_matches_joint_names(fitted):
    assert "beta" in fitted.result_.names


def test_not_fitted():
    with pytest.raises(NotFittedError):
        PreferentialHurdleModel().predict(np.zeros((1, 2)))


def test_bad_inputs(xy):
    X, y, source = xy
    est = PreferentialHurdleModel(grid_shape=(5, 5))
    with pytest.raises(InvalidArgumentError):
        est.fit(np.zeros((3, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        est.fit(X, y[:-1])
    with pytest.raises(InvalidArgumentError):
        est.fit(X, -np.abs(y) - 1)
    with pytest.raises(ValueError):
        est.fit(X, np.full(len(y), np.nan))


def test_predict_rejects_wrong_width(fitted):
    with pytest.raises(InvalidArgumentError):
        fitted.predict(np.zeros((2, 3)))


def test_bounds_from_data():
    est = PreferentialHurdleModel()
    assert est._resolve_bounds(np.array([[0.1, 0.2], [0.9, 1.0]])) == (0.0, 1.0, 0.0, 1.0)
    b = est._resolve_bounds(np.array([[10.0, 20.0], [30.0, 60.0]]))
    assert b == pytest.approx((9.0, 31.0, 18.0, 62.0))
