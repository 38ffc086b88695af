import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rmbil.estimators import (BehaviorCloning, DynamicsRegressor, ReferenceGenerator,
                              TrackingController)
from rmbil.plants import gen_demos, make_plant


@pytest.fixture(scope="module")
def ds():
    return gen_demos(make_plant("scalar"), N=4, T=40, seed=0)


def test_params_and_clone():
    est = DynamicsRegressor(hidden=16, eps=0.01)
    assert est.get_params()["hidden"] == 16
    other = clone(est).set_params(tau=4)
    assert other.tau == 4 and est.tau == 16


@pytest.mark.parametrize("cls", [DynamicsRegressor, TrackingController, BehaviorCloning])
def test_not_fitted(cls):
    with pytest.raises(NotFittedError):
        cls().predict(np.zeros((1, 2)))


def test_fit_predict_chain(ds):
    dyn = DynamicsRegressor(hidden=8, tau=4, max_epochs=1).fit(ds)
    assert dyn.predict(np.zeros((3, 2))).shape == (3, 1)
    a, g = dyn.affine_parts(np.zeros((2, 1)))
    assert a.shape == (2, 1) and g.shape == (2, 1, 1)
    ctrl = TrackingController(hidden=8, tau=4, max_epochs=1, sigma_x=0.25,
                              robust_epochs=1).fit(ds, dyn)
    assert [h["phase"] for h in ctrl.history_] == ["controller", "robust"]
    assert ctrl.predict(np.zeros((2, 2))).shape == (2, 1)
    with pytest.raises(ValueError):
        ctrl.predict(np.zeros((2, 3)))


def test_controller_needs_fitted_dynamics(ds):
    with pytest.raises(NotFittedError):
        TrackingController(tau=4).fit(ds, DynamicsRegressor())
    with pytest.raises(TypeError):
        TrackingController(tau=4).fit(ds, "model")


def test_reference_generator_and_bc(ds):
    gen = ReferenceGenerator(hidden=8, latent=2, epochs=2).fit(ds)
    np.testing.assert_array_equal(gen.sample([[0.1]], seed=1), gen.sample([[0.1]], seed=1))
    bc = BehaviorCloning(hidden=8, epochs=2).fit(ds)
    assert bc.predict([[0.1], [0.2]]).shape == (2, 1)


def test_input_validation(ds):
    with pytest.raises(TypeError):
        DynamicsRegressor().fit(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        DynamicsRegressor(tau=60).fit(ds)
    dyn = DynamicsRegressor(hidden=8, tau=4, max_epochs=1).fit(ds)
    with pytest.raises(ValueError):
        dyn.predict([[np.nan, 0.0]])
