"""Learnable components: affine dynamics, tracking controller, conditional VAE.

Each model keeps the dataset statistics it was built with and works in
standardized coordinates internally; inputs and outputs are physical.
"""
from __future__ import annotations

import numpy as np

from .diffcore import Mlp, Tape, Tensor, backward

__all__ = [
    "ModelError",
    "DynModel",
    "CtrlModel",
    "CvaeModel",
    "BcModel",
    "dyn_forward",
    "extract_affine",
    "ctrl_forward",
    "cvae_loss",
    "cvae_generate",
]


class ModelError(RuntimeError):
    """Model used in a way its structure or state does not support."""


def _stats_copy(stats):
    return {k: np.array(v, dtype=np.float64) for k, v in stats.items()}


def _check_width(x, width, what):
    if np.shape(x)[-1] != width:
        raise ValueError(f"{what} has width {np.shape(x)[-1]}, expected {width}")


class DynModel:
    """x' = a(x) + G(x) u, with a and G given by separate networks.

    ``structure="generic"`` replaces the pair with one network on (x, u); it
    exists only as an ablation.
    """

    kind = "dyn"

    def __init__(self, n, m, stats, hidden=64, structure="affine", seed=0):
        if structure not in ("affine", "generic"):
            raise ValueError(f"unknown structure {structure!r}")
        self.n, self.m, self.structure = n, m, structure
        self.stats = _stats_copy(stats)
        self.phase = None
        self.final_loss = None
        if structure == "affine":
            self.nets = [Mlp(n, n, hidden, seed=seed, out_scale=0.1, name="drift"),
                         Mlp(n, n * m, hidden, seed=seed + 1, out_scale=0.1, name="gmat")]
        else:
            self.nets = [Mlp(n + m, n, hidden, seed=seed, out_scale=0.1, name="joint")]

    @property
    def params(self):
        return [p for net in self.nets for p in net.params]

    @property
    def trained(self):
        return self.phase is not None

    def _scale_in(self, x, u):
        s = self.stats
        return (x - s["state_mean"]) / s["state_std"], (u - s["action_mean"]) / s["action_std"]

    def forward(self, x, u):
        return dyn_forward(self, x, u)

    def forward_tensor(self, x, u, tape):
        """Recorded evaluation; ``x`` and ``u`` may be Tensors."""
        s = self.stats
        xs = tape.mul(tape.sub(x, s["state_mean"]), 1.0 / s["state_std"])
        us = tape.mul(tape.sub(u, s["action_mean"]), 1.0 / s["action_std"])
        if self.structure == "affine":
            drift = self.nets[0].forward(xs, tape)
            gflat = self.nets[1].forward(xs, tape)
            lead = gflat.data.shape[:-1]
            gmat = tape.reshape(gflat, lead + (self.n, self.m))
            core = tape.add(drift, tape.bmv(gmat, us))
        else:
            core = self.nets[0].forward(tape.concat([xs, us], axis=-1), tape)
        return tape.add(tape.mul(core, s["rate_std"]), s["rate_mean"])

    def vjp(self, x, u, a):
        """Cotangents of ``a . f(x, u)`` w.r.t. x, u and the parameters."""
        tape = Tape()
        xt, ut = Tensor(x), Tensor(u)
        out = self.forward_tensor(xt, ut, tape)
        grads = backward(tape, out, a, [xt, ut] + self.params)
        return grads[0], grads[1], grads[2:]

    def copy(self):
        other = object.__new__(DynModel)
        other.__dict__.update(self.__dict__)
        other.nets = [net.copy() for net in self.nets]
        other.stats = _stats_copy(self.stats)
        return other


def dyn_forward(dm, x, u):
    """Predicted state derivative (exactly affine in ``u`` in affine mode)."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    _check_width(x, dm.n, "state")
    _check_width(u, dm.m, "control")
    xs, us = dm._scale_in(x, u)
    s = dm.stats
    if dm.structure == "affine":
        drift = dm.nets[0].reference_forward(xs)
        gmat = dm.nets[1].reference_forward(xs).reshape(xs.shape[:-1] + (dm.n, dm.m))
        core = drift + np.einsum("...nm,...m->...n", gmat, us)
    else:
        core = dm.nets[0].reference_forward(np.concatenate([xs, us], axis=-1))
    return core * s["rate_std"] + s["rate_mean"]


def extract_affine(dm, x):
    """(a(x), G(x)) read off the model by probing zero and unit controls."""
    if dm.structure != "affine":
        raise ModelError("extract_affine needs the affine structure")
    x = np.asarray(x, dtype=np.float64)
    zero = np.zeros(x.shape[:-1] + (dm.m,))
    a = dyn_forward(dm, x, zero)
    cols = []
    for j in range(dm.m):
        e = zero.copy()
        e[..., j] = 1.0
        cols.append(dyn_forward(dm, x, e) - a)
    return a, np.stack(cols, axis=-1)


class CtrlModel:
    """u = pi(nu, x): network on standardized virtual input and state."""

    kind = "ctrl"

    def __init__(self, n, m, stats, hidden=64, seed=0):
        self.n, self.m = n, m
        self.stats = _stats_copy(stats) if stats is not None else None
        self.net = Mlp(2 * n, m, hidden, seed=seed, out_scale=0.1, name="ctrl")
        self.phase = None
        self.final_loss = None
        self.clamp_hits = 0

    @property
    def params(self):
        return self.net.params

    @property
    def trained(self):
        return self.phase is not None

    def _require_stats(self):
        if self.stats is None:
            raise ModelError("controller has no normalization statistics")
        return self.stats

    def forward(self, nu, x):
        return ctrl_forward(self, nu, x)

    def forward_tensor(self, nu, x, tape):
        s = self._require_stats()
        ns = tape.mul(tape.sub(nu, s["rate_mean"]), 1.0 / s["rate_std"])
        xs = tape.mul(tape.sub(x, s["state_mean"]), 1.0 / s["state_std"])
        out = self.net.forward(tape.concat([ns, xs], axis=-1), tape)
        return tape.add(tape.mul(out, s["action_std"]), s["action_mean"])

    def copy(self):
        other = object.__new__(CtrlModel)
        other.__dict__.update(self.__dict__)
        other.net = self.net.copy()
        other.stats = None if self.stats is None else _stats_copy(self.stats)
        return other


def ctrl_forward(cm, nu, x):
    s = cm._require_stats()
    nu = np.asarray(nu, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_width(nu, cm.n, "virtual input")
    _check_width(x, cm.n, "state")
    inp = np.concatenate([(nu - s["rate_mean"]) / s["rate_std"],
                          (x - s["state_mean"]) / s["state_std"]], axis=-1)
    return cm.net.reference_forward(inp) * s["action_std"] + s["action_mean"]


class CvaeModel:
    """Encoder q(z | x_i, x_{i-1}) and decoder p(x_i | z, x_{i-1}).

    The decoder predicts the one-step change in units of ``resolution`` times
    the typical step (rate std times dt), so the output is
    ``x_prev + step_scale * decoded``. Under the unit-variance likelihood the
    resolution is the decoder noise level: at 1 the data variance equals the
    noise variance and the posterior collapses onto the prior.
    """

    kind = "cvae"

    def __init__(self, n, stats, latent=8, hidden=64, seed=0, resolution=0.1):
        if not 1 <= latent:
            raise ValueError("latent dimension must be positive")
        if not resolution > 0:
            raise ValueError("resolution must be positive")
        self.n, self.latent = n, latent
        self.resolution = float(resolution)
        self.stats = _stats_copy(stats)
        self.encoder = Mlp(2 * n, 2 * latent, hidden, seed=seed, out_scale=0.1, name="enc")
        self.decoder = Mlp(latent + n, n, hidden, seed=seed + 1, out_scale=0.1, name="dec")
        self.phase = None
        self.final_loss = None

    @property
    def params(self):
        return self.encoder.params + self.decoder.params

    @property
    def trained(self):
        return self.phase is not None

    @property
    def nets(self):
        return [self.encoder, self.decoder]

    def step_scale(self):
        return self.stats["rate_std"] * self.stats["dt"] * self.resolution

    def standardize(self, x):
        return (x - self.stats["state_mean"]) / self.stats["state_std"]

    def copy(self):
        other = object.__new__(CvaeModel)
        other.__dict__.update(self.__dict__)
        other.encoder = self.encoder.copy()
        other.decoder = self.decoder.copy()
        other.stats = _stats_copy(self.stats)
        return other


def cvae_loss(cv, x_curr, x_prev, eps, tape=None):
    """Mean (total, reconstruction, kl) over the batch for one latent draw.

    ``eps`` is the standard-normal noise of the reparameterization. With a
    tape the returned values are Tensors.
    """
    from .diffcore import NO_TAPE
    ops = NO_TAPE if tape is None else tape
    x_curr = np.asarray(x_curr, dtype=np.float64)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    _check_width(x_curr, cv.n, "state")
    batch = x_curr.shape[0] if x_curr.ndim > 1 else 1
    target = (x_curr - x_prev) / cv.step_scale()
    cond = cv.standardize(x_prev)
    enc = cv.encoder.forward(np.concatenate([target, cond], axis=-1), ops)
    mu = ops.slice(enc, slice(0, cv.latent))
    logvar = ops.slice(enc, slice(cv.latent, 2 * cv.latent))
    if not np.all(np.isfinite(logvar.data)):
        raise FloatingPointError("non-finite log-variance")
    std = ops.exp(ops.scale(logvar, 0.5))
    z = ops.add(mu, ops.mul(std, eps))
    dec = cv.decoder.forward(ops.concat([z, Tensor(cond)], axis=-1), ops)
    recon = ops.scale(ops.sum(ops.square(ops.sub(dec, target))), 0.5 / batch)
    kl_terms = ops.sub(ops.add(ops.square(mu), ops.exp(logvar)), ops.add(logvar, 1.0))
    kl = ops.scale(ops.sum(kl_terms), 0.5 / batch)
    total = ops.add(recon, kl)
    if tape is None:
        return float(total.data), float(recon.data), float(kl.data)
    return total, recon, kl


def cvae_generate(cv, x_prev, seed=None, rng=None):
    """Next-state sample with z drawn from the standard normal prior."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    _check_width(x_prev, cv.n, "state")
    if rng is None:
        rng = np.random.default_rng(seed)
    z = rng.standard_normal(x_prev.shape[:-1] + (cv.latent,))
    dec = cv.decoder.reference_forward(np.concatenate([z, cv.standardize(x_prev)], axis=-1))
    return x_prev + cv.step_scale() * dec


class BcModel:
    """Behavior-cloning baseline: u = pi(x), no reference input."""

    kind = "bc"

    def __init__(self, n, m, stats, hidden=64, seed=0):
        self.n, self.m = n, m
        self.stats = _stats_copy(stats)
        self.net = Mlp(n, m, hidden, seed=seed, out_scale=0.1, name="bc")
        self.phase = None
        self.final_loss = None

    @property
    def params(self):
        return self.net.params

    @property
    def nets(self):
        return [self.net]

    @property
    def trained(self):
        return self.phase is not None

    def predict(self, x):
        x = np.asarray(x, dtype=np.float64)
        _check_width(x, self.n, "state")
        s = self.stats
        out = self.net.reference_forward((x - s["state_mean"]) / s["state_std"])
        return out * s["action_std"] + s["action_mean"]

    def copy(self):
        other = object.__new__(BcModel)
        other.__dict__.update(self.__dict__)
        other.net = self.net.copy()
        other.stats = _stats_copy(self.stats)
        return other
