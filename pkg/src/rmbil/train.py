"""Three-phase dynamics/controller training and CVAE fitting.

Phase 1 fits the dynamics network by integrating it over windows of expert
data with the expert controls held between samples. Phase 2 freezes the
dynamics and fits the controller inside the closed loop. Phase 3 repeats
phase 2 while perturbing the integrator state at every sample boundary.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import NonFiniteError, OptimState, Tape, Tensor, adam_step, backward
from .models import CtrlModel, CvaeModel, DynModel, cvae_loss
from .odeint import (OdeFunc, SolverConfig, ZohInput, direct_grad, integrate,
                     integrate_with_grad, zoh_lookup)
from .plants import virtual_input

__all__ = [
    "PhaseOrderError",
    "DivergenceError",
    "TrainConfig",
    "model_stats",
    "split_demos",
    "make_windows",
    "DynZohOde",
    "ClosedLoopOde",
    "window_loss",
    "dynamics_window_loss",
    "controller_window_loss",
    "train_dynamics",
    "train_controller",
    "refine_robust",
    "train_cvae",
    "cvae_converged",
]

log = logging.getLogger(__name__)


class PhaseOrderError(RuntimeError):
    """A training phase was requested before its prerequisite finished."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    tau: int = 16
    batch_size: int = 2048
    eps: float = 0.002
    eps_r: float = 0.004
    sigma_x: float = 0.25
    max_epochs: int = 500
    robust_epochs: int = 2
    lr_dyn: float = 0.01
    lr_ctrl: float = 0.001
    lr_robust: float = 0.0001
    lr_cvae: float = 0.001
    gain: float = 0.1
    seed: int = 0
    grad_path: str = "adjoint"
    holdout: float = 0.1
    cvae_epochs: int = 800

    def __post_init__(self):
        if not (self.eps > 0 and self.eps_r > 0):
            raise ValueError("convergence thresholds must be positive")
        if self.tau < 1:
            raise ValueError("tau must be positive")
        if self.sigma_x < 0:
            raise ValueError("sigma_x must be non-negative")
        if self.grad_path not in ("adjoint", "direct"):
            raise ValueError(f"unknown gradient path {self.grad_path!r}")

    def to_dict(self):
        return asdict(self)


def model_stats(ds):
    stats = ds.normalization()
    stats["dt"] = np.array(ds.dt)
    return stats


def split_demos(ds, holdout):
    """Indices of training and held-out demonstrations (held-out = the tail)."""
    n_hold = int(round(holdout * ds.N)) if ds.N > 1 else 0
    n_hold = min(n_hold, ds.N - 1)
    idx = np.arange(ds.N)
    return idx[:ds.N - n_hold], idx[ds.N - n_hold:]


def make_windows(ds, tau, demos=None):
    """(demo, start) pairs for every stride-1 window of tau + 1 samples."""
    demos = np.arange(ds.N) if demos is None else np.asarray(demos)
    starts = np.arange(ds.T - tau)
    if len(starts) == 0:
        raise ValueError(f"trajectories of length {ds.T} are too short for tau={tau}")
    return np.array([(d, s) for d in demos for s in starts], dtype=np.int64)


def _gather(ds, windows, tau):
    offs = np.arange(tau + 1)
    d = windows[:, 0][:, None]
    s = windows[:, 1][:, None] + offs
    x = ds.states[d, s]           # (B, tau+1, n)
    u = ds.actions[d, s[:, :-1]]  # (B, tau, m)
    return np.swapaxes(x, 0, 1), np.swapaxes(u, 0, 1)


class DynZohOde(OdeFunc):
    """Dynamics network driven by held (expert) controls."""

    def __init__(self, dm, controls):
        self.dm = dm
        self.controls = controls
        self.params = dm.params

    def _u(self, t, seg):
        return zoh_lookup(self.controls, t if seg is None else 0.5 * (seg[0] + seg[1]))

    def rhs(self, t, x, seg=None):
        return self.dm.forward(x, self._u(t, seg))

    def vjp(self, t, x, a, seg=None):
        ax, _, ap = self.dm.vjp(x, self._u(t, seg), a)
        return ax, ap

    def rhs_tensor(self, t, x, tape, seg=None):
        return self.dm.forward_tensor(x, self._u(t, seg), tape)


class ClosedLoopOde(OdeFunc):
    """Frozen dynamics in closed loop with the controller.

    On each sample interval the reference pair (current, next) is held and
    the virtual input is recomputed from the running state. ``policy`` may
    replace the controller network by any callable ``(nu, x) -> u`` (no
    gradients in that case).
    """

    def __init__(self, dm, cm, refs, gain, dt, t0=0.0, policy=None):
        self.dm, self.cm = dm, cm
        self.refs = np.asarray(refs)
        self.gain, self.dt, self.t0 = gain, dt, t0
        self.policy = policy
        self.params = [] if cm is None else cm.params

    def _pair(self, t, seg):
        tm = t if seg is None else 0.5 * (seg[0] + seg[1])
        i = int(np.floor((tm - self.t0) / self.dt))
        if not 0 <= i < len(self.refs) - 1:
            raise ValueError(f"time {t} outside the reference horizon")
        return self.refs[i], self.refs[i + 1]

    def _control(self, nu, x):
        if self.policy is not None:
            return self.policy(nu, x)
        return self.cm.forward(nu, x)

    def rhs(self, t, x, seg=None):
        now, nxt = self._pair(t, seg)
        nu = virtual_input(self.gain, now, nxt, x, self.dt)
        return self.dm.forward(x, self._control(nu, x))

    def _tensor(self, t, x, tape, seg):
        now, nxt = self._pair(t, seg)
        const = (nxt - now) / self.dt + self.gain * now
        nu = tape.sub(const, tape.scale(x, self.gain))
        u = self.cm.forward_tensor(nu, x, tape)
        return self.dm.forward_tensor(x, u, tape)

    def vjp(self, t, x, a, seg=None):
        tape = Tape()
        xt = Tensor(x)
        out = self._tensor(t, xt, tape, seg)
        grads = backward(tape, out, a, [xt] + self.params)
        return grads[0], grads[1:]

    def rhs_tensor(self, t, x, tape, seg=None):
        return self._tensor(t, x, tape, seg)


def window_loss(pred, target, state_std):
    """Mean over windows and steps 1..tau of the standardized squared error.

    Returns the loss and its gradient with respect to ``pred``.
    """
    tau = len(pred) - 1
    batch = int(np.prod(pred.shape[1:-1])) if pred.ndim > 2 else 1
    diff = (pred - target) / state_std
    diff[0] = 0.0
    loss = float(np.sum(diff[1:] ** 2)) / (tau * batch)
    grad = 2.0 * diff / state_std / (tau * batch)
    return loss, grad


def _grads(f, x0, t_grid, solver, loss_grad, noise, path):
    if path == "adjoint":
        gp, _, _ = integrate_with_grad(f, x0, t_grid, solver, loss_grad, state_noise=noise)
    else:
        gp, _ = direct_grad(f, x0, t_grid, solver, loss_grad, state_noise=noise)
    return gp


def dynamics_window_loss(dm, ds, windows, tau, solver):
    """Open-loop window loss of the dynamics model (no gradients)."""
    xs, us = _gather(ds, windows, tau)
    t_grid = ds.dt * np.arange(tau + 1)
    f = DynZohOde(dm, ZohInput.uniform(0.0, ds.dt, us))
    pred = integrate(f, xs[0], t_grid, solver)
    return window_loss(pred, xs, dm.stats["state_std"])[0]


def controller_window_loss(dm, cm, ds, windows, tau, solver, gain, policy=None,
                           noise=None):
    """Closed-loop window loss; ``policy`` substitutes the controller network."""
    xs, _ = _gather(ds, windows, tau)
    t_grid = ds.dt * np.arange(tau + 1)
    f = ClosedLoopOde(dm, cm, xs, gain, ds.dt, policy=policy)
    pred = integrate(f, xs[0], t_grid, solver, state_noise=noise)
    return window_loss(pred, xs, dm.stats["state_std"])[0]


def _default_solver(ds, cfg):
    return SolverConfig(method="rk4", h=ds.dt, tau=max(cfg.tau, 2))


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _check(loss, phase):
    if not np.isfinite(loss):
        raise DivergenceError(f"{phase}: loss became non-finite")


def train_dynamics(dm, ds, cfg=TrainConfig(), solver=None, history=None):
    """Phase 1: fit the dynamics network on expert windows."""
    solver = solver or _default_solver(ds, cfg)
    train_idx, hold_idx = split_demos(ds, cfg.holdout)
    windows = make_windows(ds, cfg.tau, train_idx)
    hold = make_windows(ds, cfg.tau, hold_idx) if len(hold_idx) else windows
    history = [] if history is None else history
    if cfg.max_epochs <= 0:
        return dm, history
    opt = OptimState.for_params(dm.params, cfg.lr_dyn)
    rng = np.random.default_rng([cfg.seed, 1])
    t_grid = ds.dt * np.arange(cfg.tau + 1)
    for epoch in range(cfg.max_epochs):
        losses = []
        for b in _batches(len(windows), cfg.batch_size, rng):
            xs, us = _gather(ds, windows[b], cfg.tau)
            f = DynZohOde(dm, ZohInput.uniform(0.0, ds.dt, us))
            try:
                pred = integrate(f, xs[0], t_grid, solver)
                loss, lg = window_loss(pred, xs, dm.stats["state_std"])
                _check(loss, "dynamics")
                grads = _grads(f, xs[0], t_grid, solver, lg, None, cfg.grad_path)
                adam_step(dm.params, grads, opt, epoch)
            except NonFiniteError as exc:
                raise DivergenceError(f"dynamics training diverged at epoch {epoch}") from exc
            losses.append(loss)
        epoch_loss = float(np.mean(losses))
        history.append({"epoch": epoch, "phase": "dynamics", "loss": epoch_loss,
                        "lr": opt.lr_at(epoch)})
        if epoch_loss < cfg.eps:
            break
    dm.phase = "dynamics"
    dm.final_loss = dynamics_window_loss(dm, ds, hold, cfg.tau, solver)
    history[-1]["holdout"] = dm.final_loss
    return dm, history


def _controller_loop(dm, cm, ds, cfg, solver, sigma, threshold, phase, history, epochs, lr):
    train_idx, _ = split_demos(ds, cfg.holdout)
    windows = make_windows(ds, cfg.tau, train_idx)
    history = [] if history is None else history
    if epochs <= 0:
        return cm, history
    opt = OptimState.for_params(cm.params, lr)
    rng = np.random.default_rng([cfg.seed, 2])
    noise_rng = np.random.default_rng([cfg.seed, 3])
    t_grid = ds.dt * np.arange(cfg.tau + 1)
    sx = dm.stats["state_std"]
    for epoch in range(epochs):
        losses = []
        for b in _batches(len(windows), cfg.batch_size, rng):
            xs, _ = _gather(ds, windows[b], cfg.tau)
            noise = None
            if sigma > 0:
                noise = sigma * sx * noise_rng.standard_normal((cfg.tau,) + xs.shape[1:])
            f = ClosedLoopOde(dm, cm, xs, cfg.gain, ds.dt)
            try:
                pred = integrate(f, xs[0], t_grid, solver, state_noise=noise)
                loss, lg = window_loss(pred, xs, sx)
                _check(loss, phase)
                grads = _grads(f, xs[0], t_grid, solver, lg, noise, cfg.grad_path)
                adam_step(cm.params, grads, opt, epoch)
            except NonFiniteError as exc:
                raise DivergenceError(f"{phase} training diverged at epoch {epoch}") from exc
            losses.append(loss)
        epoch_loss = float(np.mean(losses))
        history.append({"epoch": epoch, "phase": phase, "loss": epoch_loss,
                        "lr": opt.lr_at(epoch)})
        if epoch_loss < threshold:
            break
    cm.phase = phase
    cm.final_loss = history[-1]["loss"]
    return cm, history


def train_controller(dm, cm, ds, cfg=TrainConfig(), solver=None, history=None):
    """Phase 2: fit the controller through the frozen dynamics."""
    if not dm.trained:
        raise PhaseOrderError("train_controller needs a trained dynamics model")
    if dm.final_loss is not None and dm.final_loss >= cfg.eps:
        log.warning("dynamics held-out loss %.4g is above eps=%.4g", dm.final_loss, cfg.eps)
    solver = solver or _default_solver(ds, cfg)
    return _controller_loop(dm, cm, ds, cfg, solver, 0.0, cfg.eps, "controller", history,
                            cfg.max_epochs, cfg.lr_ctrl)


def refine_robust(dm, cm, ds, cfg=TrainConfig(), solver=None, history=None):
    """Phase 3: continue controller training with state noise at sample times."""
    if not dm.trained:
        raise PhaseOrderError("refine_robust needs a trained dynamics model")
    if not cm.trained:
        raise PhaseOrderError("refine_robust needs a controller from train_controller")
    solver = solver or _default_solver(ds, cfg)
    return _controller_loop(dm, cm, ds, cfg, solver, cfg.sigma_x, cfg.eps_r, "robust", history,
                            cfg.robust_epochs, cfg.lr_robust)


def train_cvae(cv, ds, cfg=TrainConfig(), history=None):
    """Fit the CVAE on consecutive state pairs.

    After every epoch the loss parts are re-evaluated on all pairs with one
    fixed latent draw, so successive history rows differ only through the
    parameters (the convergence check reads these, not minibatch averages).
    """
    history = [] if history is None else history
    x_prev = ds.states[:, :-1].reshape(-1, ds.n)
    x_curr = ds.states[:, 1:].reshape(-1, ds.n)
    if len(x_prev) == 0:
        raise ValueError("dataset has no consecutive state pairs")
    if cfg.cvae_epochs <= 0:
        return cv, history
    opt = OptimState.for_params(cv.params, cfg.lr_cvae)
    rng = np.random.default_rng([cfg.seed, 4])
    eval_eps = np.random.default_rng([cfg.seed, 6]).standard_normal((len(x_prev), cv.latent))
    for epoch in range(cfg.cvae_epochs):
        tot, count = 0.0, 0
        for b in _batches(len(x_prev), cfg.batch_size, rng):
            eps = rng.standard_normal((len(b), cv.latent))
            tape = Tape()
            try:
                total, _, _ = cvae_loss(cv, x_curr[b], x_prev[b], eps, tape)
                grads = backward(tape, total, np.array(1.0), cv.params)
                adam_step(cv.params, grads, opt, epoch)
            except (NonFiniteError, FloatingPointError) as exc:
                raise DivergenceError(f"cvae training diverged at epoch {epoch}") from exc
            tot += float(total.data) * len(b)
            count += len(b)
        _, rec, kl = cvae_loss(cv, x_curr, x_prev, eval_eps)
        history.append({"epoch": epoch, "phase": "cvae", "loss": tot / count,
                        "reconstruction": rec, "kl": kl, "lr": opt.lr_at(epoch)})
    cv.phase = "cvae"
    cv.final_loss = history[-1]["reconstruction"] + history[-1]["kl"]
    return cv, history


def cvae_converged(history, window=20, tol=0.01):
    """True when reconstruction and KL each changed by < tol (relative)
    between every pair of consecutive epochs in the last ``window`` epochs."""
    if len(history) < window + 1:
        return False
    for key in ("reconstruction", "kl"):
        v = np.array([row[key] for row in history[-(window + 1):]])
        if np.any(np.abs(np.diff(v)) >= tol * np.abs(v[:-1])):
            return False
    return True
