"""ODE integration with zero-order-hold inputs and two gradient routes.

The integrator restarts at every output time, so a piecewise-constant
input never jumps inside a step. Gradients come either from the adjoint
system solved backward in time (:func:`integrate_with_grad`) or from a tape
recorded through fixed-step RK4 (:func:`integrate_direct`).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import NonFiniteError, Tape, Tensor, backward

__all__ = [
    "StepSizeUnderflow",
    "ZohInput",
    "zoh_lookup",
    "SolverConfig",
    "OdeFunc",
    "FuncOde",
    "integrate",
    "integrate_with_grad",
    "integrate_direct",
    "direct_grad",
    "adjoint_state_size",
]


class StepSizeUnderflow(RuntimeError):
    """The adaptive controller shrank the step below the usable minimum."""


@dataclass(frozen=True)
class ZohInput:
    """Piecewise-constant signal built from uniformly spaced samples.

    ``samples[i]`` is held on ``[times[i], times[i] + dt)``. Samples may carry
    extra trailing axes (e.g. a batch axis).
    """

    times: np.ndarray
    samples: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        samples = np.asarray(self.samples, dtype=np.float64)
        if times.ndim != 1 or len(times) < 1:
            raise ValueError("times must be a non-empty 1-d array")
        if len(samples) != len(times):
            raise ValueError("one sample per time required")
        if len(times) > 1:
            steps = np.diff(times)
            if np.any(steps <= 0):
                raise ValueError("times must be strictly increasing")
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
                raise ValueError("times must be uniformly spaced")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "samples", samples)

    @property
    def dt(self):
        if len(self.times) > 1:
            return float(self.times[1] - self.times[0])
        return np.inf

    @classmethod
    def uniform(cls, t0, dt, samples):
        samples = np.asarray(samples, dtype=np.float64)
        return cls(t0 + dt * np.arange(len(samples)), samples)


def zoh_lookup(z, t):
    """Return the sample held at time ``t``; intervals are left-closed."""
    t0 = z.times[0]
    end = z.times[-1] + z.dt
    if not (t0 <= t < end):
        raise ValueError(f"time {t} outside the held range [{t0}, {end})")
    i = int(np.searchsorted(z.times, t, side="right")) - 1
    return z.samples[i]


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"          # "rk4" (fixed step) or "dopri5" (adaptive)
    h: float = 0.05
    atol: float = 1e-4
    rtol: float = 1e-4
    tau: int = 16
    max_steps: int = 100_000

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if not (self.atol > 0 and self.rtol > 0 and self.h > 0):
            raise ValueError("step and tolerances must be positive")
        if self.tau < 2:
            raise ValueError("tau must be at least 2")


class OdeFunc:
    """Right-hand side ``x' = f(t, x)``.

    ``seg`` is the ``(start, end)`` of the interval currently being
    integrated; functions driven by held inputs use it to pick the sample
    without looking up exactly at a boundary. Subclasses with learnable
    parameters list them in ``params`` and implement :meth:`vjp` and
    :meth:`rhs_tensor`.
    """

    params: list = []

    def rhs(self, t, x, seg=None):
        raise NotImplementedError

    def __call__(self, t, x):
        return self.rhs(t, x)

    def vjp(self, t, x, a, seg=None):
        """Return ``(a^T df/dx, [a^T df/dp for p in params])``."""
        raise NotImplementedError

    def rhs_tensor(self, t, x, tape, seg=None):
        raise NotImplementedError


class FuncOde(OdeFunc):
    """Wrap a plain callable ``f(t, x)`` (no parameters, no gradients)."""

    def __init__(self, fn):
        self.fn = fn
        self.params = []

    def rhs(self, t, x, seg=None):
        return np.asarray(self.fn(t, x), dtype=np.float64)


def _as_odefunc(f):
    return f if isinstance(f, OdeFunc) else FuncOde(f)


# --- generic steppers on flat vectors --------------------------------------

def _rk4_segment(rhs, y, a, b, h):
    span = b - a
    n = int(round(abs(span) / h))
    if n == 0 or abs(n * h - abs(span)) > 1e-9 * max(1.0, abs(span)):
        raise ValueError(f"segment length {abs(span)} is not a multiple of h={h}")
    step = span / n
    for j in range(n):
        t = a + j * step
        k1 = rhs(t, y)
        k2 = rhs(t + step / 2, y + step / 2 * k1)
        k3 = rhs(t + step / 2, y + step / 2 * k2)
        k4 = rhs(t + step, y + step * k3)
        y = y + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y, n


# Dormand-Prince 5(4)
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                   -92097 / 339200, 187 / 2100, 1 / 40])


def _dopri_segment(rhs, y, a, b, atol, rtol, max_steps, h0=None):
    span = b - a
    direction = 1.0 if span > 0 else -1.0
    t = a
    f0 = rhs(t, y)
    if h0 is None:
        scale = atol + rtol * np.abs(y)
        d0 = np.max(np.abs(y) / scale)
        d1 = np.max(np.abs(f0) / scale)
        h0 = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-3
        h0 = min(h0, abs(span))
    h = h0
    hmin = 1e-12 * max(1.0, abs(span))
    steps = 0
    while direction * (b - t) > 1e-14 * max(1.0, abs(b)):
        if steps >= max_steps:
            raise StepSizeUnderflow("maximum number of adaptive steps exceeded")
        h = min(h, abs(b - t))
        hs = direction * h
        k = [f0]
        for i in range(1, 7):
            yi = y + hs * sum(c * kj for c, kj in zip(_DP_A[i], k))
            k.append(rhs(t + _DP_C[i] * hs, yi))
        y5 = y + hs * sum(c * kj for c, kj in zip(_DP_B5, k))
        y4 = y + hs * sum(c * kj for c, kj in zip(_DP_B4, k))
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        err = np.max(np.abs(y5 - y4) / scale) if y.size else 0.0
        steps += 1
        if err <= 1.0:
            t = t + hs
            y = y5
            f0 = k[6]
        factor = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        h = h * factor
        if h < hmin:
            raise StepSizeUnderflow(f"step size {h} underflow at t={t}")
    return y, steps


def _solve(rhs, y, a, b, cfg):
    if cfg.method == "rk4":
        return _rk4_segment(rhs, y, a, b, cfg.h)[0]
    return _dopri_segment(rhs, y, a, b, cfg.atol, cfg.rtol, cfg.max_steps)[0]


def _check_grid(t_grid):
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or len(t_grid) < 1:
        raise ValueError("t_grid must be a non-empty 1-d array")
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    return t_grid


def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what}")
    return arr


def _forward(f, x0, t_grid, cfg, state_noise=None):
    """Integrate and return (outputs, pre_jump) at every grid time."""
    f = _as_odefunc(f)
    t_grid = _check_grid(t_grid)
    x0 = np.array(x0, dtype=np.float64)
    shape = x0.shape
    out = np.empty((len(t_grid),) + shape)
    pre = np.empty_like(out)
    x = x0.copy()
    pre[0] = x
    if state_noise is not None:
        x = x + state_noise[0]
    out[0] = x
    for k in range(1, len(t_grid)):
        seg = (t_grid[k - 1], t_grid[k])

        def rhs(t, y, seg=seg):
            return _finite(f.rhs(t, y.reshape(shape), seg), "derivative").ravel()

        x = _solve(rhs, x.ravel(), seg[0], seg[1], cfg).reshape(shape)
        pre[k] = x
        if state_noise is not None and k < len(state_noise):
            x = x + state_noise[k]
        out[k] = x
    return out, pre


def integrate(f, x0, t_grid, cfg=SolverConfig(), state_noise=None):
    """States at each time in ``t_grid`` starting from ``x0`` at ``t_grid[0]``.

    ``state_noise[k]``, when given, is added to the state right after it
    reaches ``t_grid[k]`` (the reported value includes the jump).
    """
    return _forward(f, x0, t_grid, cfg, state_noise)[0]


def adjoint_state_size(n, n_params):
    """Size of the backward-in-time adjoint: state adjoint, parameter adjoint, time."""
    return n + n_params + 1


def integrate_with_grad(f, x0, t_grid, cfg, loss_grads, state_noise=None, traj=None):
    """Adjoint-sensitivity gradients of a loss defined on the output states.

    ``loss_grads[k]`` is dLoss/dx(t_grid[k]). Returns ``(param_grads, x0_grad,
    info)``; ``info`` carries the adjoint dimension and the time adjoint.
    """
    f = _as_odefunc(f)
    t_grid = _check_grid(t_grid)
    loss_grads = np.asarray(loss_grads, dtype=np.float64)
    if len(loss_grads) != len(t_grid):
        raise ValueError("need one loss gradient per output time")
    if traj is None:
        _, pre = _forward(f, x0, t_grid, cfg, state_noise)
    else:
        pre = traj
    shape = pre.shape[1:]
    size = int(np.prod(shape))
    p_shapes = [p.data.shape for p in f.params]
    p_sizes = [int(np.prod(s)) for s in p_shapes]
    n_p = sum(p_sizes)

    def unpack_params(vec):
        out, i = [], 0
        for s, sz in zip(p_shapes, p_sizes):
            out.append(vec[i:i + sz].reshape(s))
            i += sz
        return out

    a = loss_grads[-1].copy()
    g_p = np.zeros(n_p)
    g_t = 0.0
    for k in range(len(t_grid) - 1, 0, -1):
        seg = (t_grid[k - 1], t_grid[k])

        def aug_rhs(t, y, seg=seg):
            x = y[:size].reshape(shape)
            adj = y[size:2 * size].reshape(shape)
            fx = _finite(f.rhs(t, x, seg), "derivative")
            ax, ap = f.vjp(t, x, adj, seg)
            parts = [fx.ravel(), -np.asarray(ax).ravel()]
            parts.extend(-np.asarray(g).ravel() for g in ap)
            parts.append([0.0])  # right-hand sides here do not depend on t explicitly
            return np.concatenate(parts)

        y = np.concatenate([pre[k].ravel(), a.ravel(), g_p, [g_t]])
        y = _solve(aug_rhs, y, seg[1], seg[0], cfg)
        a = y[size:2 * size].reshape(shape) + loss_grads[k - 1]
        g_p = y[2 * size:2 * size + n_p]
        g_t = float(y[-1])
    info = {"adjoint_dim": adjoint_state_size(size, n_p), "time_adjoint": g_t}
    return unpack_params(g_p), a, info


def integrate_direct(f, x0, t_grid, cfg, tape, state_noise=None):
    """Fixed-step RK4 recorded on ``tape``; returns (x0 leaf, output tensors)."""
    f = _as_odefunc(f)
    t_grid = _check_grid(t_grid)
    x0_t = x0 if isinstance(x0, Tensor) else Tensor(np.array(x0, dtype=np.float64),
                                                   requires_grad=True)
    x = x0_t
    if state_noise is not None:
        x = tape.add(x, state_noise[0])
    outs = [x]
    for k in range(1, len(t_grid)):
        seg = (t_grid[k - 1], t_grid[k])
        span = seg[1] - seg[0]
        n = int(round(span / cfg.h))
        if n == 0 or abs(n * cfg.h - span) > 1e-9 * max(1.0, span):
            raise ValueError(f"segment length {span} is not a multiple of h={cfg.h}")
        step = span / n
        for j in range(n):
            t = seg[0] + j * step
            k1 = f.rhs_tensor(t, x, tape, seg)
            k2 = f.rhs_tensor(t + step / 2, tape.add(x, tape.scale(k1, step / 2)), tape, seg)
            k3 = f.rhs_tensor(t + step / 2, tape.add(x, tape.scale(k2, step / 2)), tape, seg)
            k4 = f.rhs_tensor(t + step, tape.add(x, tape.scale(k3, step)), tape, seg)
            incr = tape.add(tape.add(k1, tape.scale(k2, 2.0)), tape.add(tape.scale(k3, 2.0), k4))
            x = tape.add(x, tape.scale(incr, step / 6))
        if state_noise is not None and k < len(state_noise):
            x = tape.add(x, state_noise[k])
        outs.append(x)
    return x0_t, outs


def direct_grad(f, x0, t_grid, cfg, loss_grads, state_noise=None):
    """Same contract as :func:`integrate_with_grad` via the RK4 tape."""
    tape = Tape()
    x0_t, outs = integrate_direct(f, x0, t_grid, cfg, tape, state_noise)
    loss_grads = np.asarray(loss_grads, dtype=np.float64)
    total = None
    for xk, gk in zip(outs, loss_grads):
        term = tape.sum(tape.mul(xk, gk))
        total = term if total is None else tape.add(total, term)
    grads = backward(tape, total, np.array(1.0), [x0_t] + list(f.params))
    return grads[1:], grads[0]
