"""scikit-learn style wrappers around the training pipeline.

The wrappers only hold hyperparameters (so ``get_params``/``set_params`` and
``clone`` work) and delegate to :mod:`rmbil.train`. Fitted state lives in
attributes with a trailing underscore.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from ._validation import check_array_2d, check_dataset, check_fitted, check_positive
from .evalkit import train_bc
from .models import (CtrlModel, CvaeModel, DynModel, ctrl_forward, cvae_generate,
                     dyn_forward, extract_affine)
from .train import (TrainConfig, model_stats, refine_robust, train_controller, train_cvae,
                    train_dynamics)

__all__ = ["DynamicsRegressor", "TrackingController", "ReferenceGenerator",
           "BehaviorCloning"]


class DynamicsRegressor(BaseEstimator):
    """Input-affine dynamics fitted through the ODE solver on expert windows.

    ``predict`` takes rows ``[x, u]`` and returns the state derivative.
    """

    def __init__(self, hidden=64, structure="affine", tau=16, eps=0.002, max_epochs=500,
                 batch_size=256, lr=0.01, grad_path="direct", seed=0):
        self.hidden = hidden
        self.structure = structure
        self.tau = tau
        self.eps = eps
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.grad_path = grad_path
        self.seed = seed

    def fit(self, ds, y=None):
        check_dataset(ds, self.tau + 2)
        check_positive(self.eps, "eps")
        cfg = TrainConfig(tau=self.tau, eps=self.eps, max_epochs=self.max_epochs,
                          batch_size=self.batch_size, lr_dyn=self.lr,
                          grad_path=self.grad_path, seed=self.seed)
        dm = DynModel(ds.n, ds.m, model_stats(ds), hidden=self.hidden,
                      structure=self.structure, seed=self.seed)
        self.model_, self.history_ = train_dynamics(dm, ds, cfg)
        self.n_states_, self.n_controls_ = ds.n, ds.m
        return self

    def predict(self, X):
        dm = check_fitted(self)
        X = check_array_2d(X, dm.n + dm.m)
        return dyn_forward(dm, X[:, :dm.n], X[:, dm.n:])

    def affine_parts(self, x):
        """(a(x), G(x)) of the fitted model."""
        dm = check_fitted(self)
        return extract_affine(dm, check_array_2d(x, dm.n, "x"))


def _dyn_model(dynamics):
    if isinstance(dynamics, DynamicsRegressor):
        return check_fitted(dynamics)
    if isinstance(dynamics, DynModel):
        return dynamics
    raise TypeError("dynamics must be a fitted DynamicsRegressor or a DynModel")


class TrackingController(BaseEstimator):
    """Controller u = pi(nu, x) trained in closed loop with frozen dynamics.

    With ``sigma_x > 0`` the fit continues with the noise-injection phase.
    ``predict`` takes rows ``[nu, x]``.
    """

    def __init__(self, gain=0.1, hidden=64, tau=16, eps=0.002, max_epochs=500,
                 batch_size=256, lr=0.001, sigma_x=0.0, robust_epochs=2, lr_robust=1e-4,
                 grad_path="direct", seed=0):
        self.gain = gain
        self.hidden = hidden
        self.tau = tau
        self.eps = eps
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.sigma_x = sigma_x
        self.robust_epochs = robust_epochs
        self.lr_robust = lr_robust
        self.grad_path = grad_path
        self.seed = seed

    def _cfg(self):
        return TrainConfig(tau=self.tau, eps=self.eps, eps_r=2 * self.eps,
                           max_epochs=self.max_epochs, batch_size=self.batch_size,
                           lr_ctrl=self.lr, sigma_x=self.sigma_x,
                           robust_epochs=self.robust_epochs, lr_robust=self.lr_robust,
                           gain=self.gain, grad_path=self.grad_path, seed=self.seed)

    def fit(self, ds, dynamics):
        check_dataset(ds, self.tau + 2)
        dm = _dyn_model(dynamics)
        cfg = self._cfg()
        cm = CtrlModel(ds.n, ds.m, model_stats(ds), hidden=self.hidden, seed=self.seed + 100)
        cm, hist = train_controller(dm, cm, ds, cfg)
        if self.sigma_x > 0:
            cm, hist = refine_robust(dm, cm, ds, cfg, history=hist)
        self.model_, self.history_ = cm, hist
        return self

    def predict(self, X):
        cm = check_fitted(self)
        X = check_array_2d(X, 2 * cm.n)
        return ctrl_forward(cm, X[:, :cm.n], X[:, cm.n:])


class ReferenceGenerator(BaseEstimator):
    """CVAE proposing the next reference state from the previous one."""

    def __init__(self, latent=8, hidden=64, resolution=0.1, epochs=800, batch_size=256,
                 lr=0.001, seed=0):
        self.latent = latent
        self.hidden = hidden
        self.resolution = resolution
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, ds, y=None):
        check_dataset(ds)
        cfg = TrainConfig(cvae_epochs=self.epochs, batch_size=self.batch_size,
                          lr_cvae=self.lr, seed=self.seed)
        cv = CvaeModel(ds.n, model_stats(ds), latent=self.latent, hidden=self.hidden,
                       seed=self.seed + 200, resolution=self.resolution)
        self.model_, self.history_ = train_cvae(cv, ds, cfg)
        return self

    def sample(self, x_prev, seed=None):
        cv = check_fitted(self)
        return cvae_generate(cv, check_array_2d(x_prev, cv.n, "x_prev"), seed=seed)


class BehaviorCloning(BaseEstimator, RegressorMixin):
    """State-to-action regression baseline; ``fit`` takes the demo dataset."""

    def __init__(self, hidden=64, epochs=200, seed=0):
        self.hidden = hidden
        self.epochs = epochs
        self.seed = seed

    def fit(self, ds, y=None):
        check_dataset(ds)
        self.model_, self.history_ = train_bc(ds, epochs=self.epochs, hidden=self.hidden,
                                              seed=self.seed)
        return self

    def predict(self, X):
        bc = check_fitted(self)
        return bc.predict(check_array_2d(X, bc.n))
