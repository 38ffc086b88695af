"""Closed-loop evaluation on the analytic plants.

A rollout drives a batch of episodes in lockstep: at every sample the policy
sees the current state and the held reference pair, the plant is integrated
over one period with the control held, and the per-step reward
``1 - min(1, |x - x_r|^2)`` is accumulated until the episode ends or leaves
the plant domain. Scores are normalized per evaluation batch against the
analytic expert (score 1) and unit Gaussian control noise (score 0), both run
on the same references, initial states and disturbance.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .diffcore import OptimState, Tape, Tensor, adam_step, backward
from .models import BcModel, ctrl_forward, cvae_generate, extract_affine
from .plants import (NOMINAL, DisturbanceCfg, expert_control, ndi_oracle, step_plant,
                     virtual_input)

__all__ = [
    "RolloutCfg",
    "Trace",
    "EvalReport",
    "NdiPolicy",
    "ExpertPolicy",
    "RandomPolicy",
    "BcPolicy",
    "replay_references",
    "cvae_references",
    "rollout",
    "evaluate",
    "normalized_scores",
    "prop1_check",
    "robustness_sweep",
    "train_bc",
    "bc_baseline",
    "write_trace",
    "default_disturbances",
]

log = logging.getLogger(__name__)

EXPERT_GAIN = 5.0
# input-channel bias magnitudes (force or torque units) per plant
DISTURBANCE_SCALE = {"scalar": 0.3, "pendulum": 1.0, "pointmass": 0.5}


def default_disturbances(p):
    """Named environment variants used by the sweeps.

    ``slope`` is a constant bias on every input channel, ``uneven`` a bias
    redrawn on each 0.25-long stretch of the terrain coordinate with
    magnitude up to 5/3 of the slope value, ``param-shift`` (plants with
    physical constants only) a 30% heavier body.
    """
    b = DISTURBANCE_SCALE.get(p.name, 0.3)
    out = {"nominal": NOMINAL,
           "slope": DisturbanceCfg("slope", bias=(b,) * p.m),
           "uneven": DisturbanceCfg("uneven", span=0.25, amplitude=(0.0, b * 5.0 / 3.0))}
    if "mass" in p.constants:
        out["param-shift"] = DisturbanceCfg("param-shift", shift={"mass": 0.3})
    return out


@dataclass(frozen=True)
class RolloutCfg:
    source: str = "replay"          # "replay" or "cvae"
    gain: float = 0.1
    steps: int = 199
    disturbance: DisturbanceCfg = NOMINAL
    seed: int = 0
    episodes: int = 50
    init_noise: float = 0.05        # initial offset, in state-std units
    substeps: int = 5

    def __post_init__(self):
        if self.source not in ("replay", "cvae"):
            raise ValueError(f"unknown reference source {self.source!r}")
        if self.steps < 2:
            raise ValueError("need at least 2 steps")
        if self.episodes < 1:
            raise ValueError("need at least one episode")

    def to_dict(self):
        d = asdict(self)
        d["disturbance"] = self.disturbance.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["disturbance"] = DisturbanceCfg.from_dict(d.get("disturbance", {"kind": "none"}))
        return cls(**d)


# --- policies ---------------------------------------------------------------
# Every policy maps (x, ref_now, ref_next) for a batch of episodes to controls.

class NdiPolicy:
    """Learned tracking controller fed with the virtual input."""

    def __init__(self, cm, gain, dt):
        self.cm, self.gain, self.dt = cm, float(gain), float(dt)

    def __call__(self, x, ref_now, ref_next):
        nu = virtual_input(self.gain, ref_now, ref_next, x, self.dt)
        return ctrl_forward(self.cm, nu, x)


class ExpertPolicy:
    """Analytic NDI on the nominal plant model (K_n = 5 by default)."""

    def __init__(self, plant, gain=EXPERT_GAIN):
        self.plant, self.gain = plant, float(gain)

    def __call__(self, x, ref_now, ref_next):
        return expert_control(self.plant, x, ref_now, ref_next, self.gain)


class RandomPolicy:
    """Zero-mean, unit-variance Gaussian controls from a seeded stream."""

    def __init__(self, m, seed=0):
        self.m = m
        self.rng = np.random.default_rng([seed, 7])

    def __call__(self, x, ref_now, ref_next):
        return self.rng.standard_normal(x.shape[:-1] + (self.m,))


class BcPolicy:
    """State-only policy; the reference is ignored."""

    def __init__(self, bc):
        self.bc = bc

    def __call__(self, x, ref_now, ref_next):
        return self.bc.predict(x)


# --- references -------------------------------------------------------------

def replay_references(ds, episodes, steps):
    """Demo state sequences reused as references, episode e -> demo e mod N."""
    if steps + 1 > ds.T:
        raise ValueError(f"{steps} steps need {steps + 1} samples, demos have {ds.T}")
    idx = np.arange(episodes) % ds.N
    return ds.states[idx, :steps + 1].copy()


def cvae_references(cv, x0, steps, seed=0):
    """Autoregressive decoder samples with z ~ N(0, I), starting at ``x0``."""
    rng = np.random.default_rng([seed, 11])
    x0 = np.asarray(x0, dtype=np.float64)
    refs = np.empty((len(x0), steps + 1, x0.shape[-1]))
    refs[:, 0] = x0
    for i in range(steps):
        refs[:, i + 1] = cvae_generate(cv, refs[:, i], rng=rng)
    return refs


# --- rollout ----------------------------------------------------------------

@dataclass
class Trace:
    states: np.ndarray      # (E, T+1, n)
    refs: np.ndarray        # (E, T+1, n)
    controls: np.ndarray    # (E, T, m)
    rewards: np.ndarray     # (E, T), zero after termination
    alive: np.ndarray       # (E, T) bool, step ended inside the domain
    terminated: np.ndarray  # (E,) bool, episode left the domain early
    dt: float

    @property
    def returns(self):
        return self.rewards.sum(axis=1)

    @property
    def lengths(self):
        return self.alive.sum(axis=1)

    def tracking_rms(self):
        err = np.sum((self.states[:, 1:] - self.refs[:, 1:]) ** 2, axis=-1)
        n = np.maximum(self.lengths, 1)
        return np.sqrt(np.sum(np.where(self.alive, err, 0.0), axis=1) / n)


def _initial_states(refs, scale, cfg):
    rng = np.random.default_rng([cfg.seed, 5])
    noise = rng.standard_normal(refs[:, 0].shape) * cfg.init_noise * scale
    return refs[:, 0] + noise


def rollout(plant, policy, refs, cfg, scale=None):
    """Run ``policy`` on ``plant`` against ``refs`` of shape (E, T+1, n).

    ``scale`` sets the per-dimension unit of the initial offset. Episodes
    whose state leaves the plant domain (or stops being finite) end there and
    collect no further reward.
    """
    refs = np.asarray(refs, dtype=np.float64)
    E, T = refs.shape[0], refs.shape[1] - 1
    scale = np.ones(plant.n) if scale is None else np.asarray(scale)
    x = _initial_states(refs, scale, cfg)
    states = np.zeros((E, T + 1, plant.n))
    controls = np.zeros((E, T, plant.m))
    rewards = np.zeros((E, T))
    alive_log = np.zeros((E, T), dtype=bool)
    alive = plant.in_domain(x)
    terminated = ~alive
    states[:, 0] = x
    for i in range(T):
        if not alive.any():
            states[:, i + 1:] = x[:, None]
            break
        u = np.asarray(policy(x, refs[:, i], refs[:, i + 1]), dtype=np.float64)
        u = np.where(alive[:, None] & np.isfinite(u), u, 0.0)
        with np.errstate(all="ignore"):
            x_next = step_plant(plant, cfg.disturbance, x, u, cfg.substeps)
        ok = alive & np.all(np.isfinite(x_next), axis=-1)
        ok &= plant.in_domain(np.where(np.isfinite(x_next), x_next, np.inf))
        alive_log[:, i] = ok
        terminated |= alive & ~ok
        err = np.sum((x_next - refs[:, i + 1]) ** 2, axis=-1)
        rewards[:, i] = np.where(ok, 1.0 - np.minimum(1.0, np.nan_to_num(err, nan=1.0)), 0.0)
        controls[:, i] = u
        # terminated episodes stay frozen at their last valid state
        x = np.where(ok[:, None], x_next, x)
        states[:, i + 1] = x
        alive = ok
    return Trace(states, refs, controls, rewards, alive_log, terminated, plant.dt)


def normalized_scores(returns, expert_returns, random_returns):
    """(R - mean R_random) / (mean R_expert - mean R_random)."""
    hi, lo = float(np.mean(expert_returns)), float(np.mean(random_returns))
    if not hi > lo:
        raise ValueError(f"expert return {hi:.4g} does not exceed random return {lo:.4g}")
    return (np.asarray(returns) - lo) / (hi - lo)


def _stats(v):
    v = np.asarray(v, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std()), "min": float(v.min()),
            "max": float(v.max()), "median": float(np.median(v))}


@dataclass
class EvalReport:
    axes: dict
    rms: np.ndarray = None
    reward: np.ndarray = None
    score: np.ndarray = None
    terminated: np.ndarray = None
    anchors: dict = field(default_factory=dict)
    status: str = "ok"
    error: str = ""

    def aggregate(self):
        if self.status != "ok":
            return {}
        return {"rms": _stats(self.rms), "reward": _stats(self.reward),
                "score": _stats(self.score),
                "terminated": int(np.sum(self.terminated))}

    def to_dict(self):
        d = {"axes": self.axes, "status": self.status, "error": self.error,
             "anchors": self.anchors, "aggregate": self.aggregate()}
        for key in ("rms", "reward", "score", "terminated"):
            val = getattr(self, key)
            d[key] = None if val is None else np.asarray(val).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        arr = {k: None if d.get(k) is None else np.asarray(d[k])
               for k in ("rms", "reward", "score", "terminated")}
        if arr["terminated"] is not None:
            arr["terminated"] = arr["terminated"].astype(bool)
        return cls(axes=d["axes"], anchors=d.get("anchors", {}),
                   status=d.get("status", "ok"), error=d.get("error", ""), **arr)


def _anchor_returns(plant, refs, cfg, scale):
    exp = rollout(plant, ExpertPolicy(plant), refs, cfg, scale).returns
    rnd = rollout(plant, RandomPolicy(plant.m, cfg.seed), refs, cfg, scale).returns
    return exp, rnd


def evaluate(plant, policy, refs, cfg, scale=None, axes=None, anchors=None):
    """Roll out ``policy`` and score it against seed-matched anchors."""
    if anchors is None:
        anchors = _anchor_returns(plant, refs, cfg, scale)
    trace = rollout(plant, policy, refs, cfg, scale)
    exp, rnd = anchors
    axes = dict(axes or {})
    axes.setdefault("gain", cfg.gain)
    axes.setdefault("disturbance", cfg.disturbance.to_dict())
    axes.setdefault("source", cfg.source)
    axes.setdefault("episodes", int(len(refs)))
    return EvalReport(axes=axes, rms=trace.tracking_rms(), reward=trace.returns,
                      score=normalized_scores(trace.returns, exp, rnd),
                      terminated=trace.terminated,
                      anchors={"expert": float(np.mean(exp)), "random": float(np.mean(rnd))})


def robustness_sweep(plant, controllers, refs, disturbances, gains, cfg, scale=None):
    """EvalReport for every (disturbance, gain, controller) cell.

    ``controllers`` maps a name to ``(make_policy, uses_gain)`` where
    ``make_policy(gain)`` returns a policy. Controllers that ignore the gain
    get one cell per disturbance, with gain recorded as None. Cells that raise
    are kept and marked failed.
    """
    reports = []
    for dname, dist in disturbances.items():
        dcfg = replace(cfg, disturbance=dist)
        anchors = _anchor_returns(plant, refs, dcfg, scale)
        for cname, (make_policy, uses_gain) in controllers.items():
            for gain in (gains if uses_gain else [None]):
                axes = {"plant": plant.name, "controller": cname, "disturbance": dname,
                        "disturbance_cfg": dist.to_dict(), "gain": gain,
                        "source": cfg.source, "episodes": int(len(refs))}
                try:
                    gcfg = dcfg if gain is None else replace(dcfg, gain=gain)
                    rep = evaluate(plant, make_policy(gain), refs, gcfg, scale, axes, anchors)
                except Exception as exc:  # keep the grid exhaustive
                    log.warning("sweep cell %s failed: %s", axes, exc)
                    rep = EvalReport(axes=axes, status="failed", error=f"{type(exc).__name__}: {exc}")
                reports.append(rep)
    return reports


# --- distance to closed-form NDI -------------------------------------------

def prop1_check(cm, plant, ds, dm=None, gain=0.1, n_pairs=1000, seed=0):
    """Distance of the learned controller to closed-form NDI.

    Pairs (x, nu) are drawn from the demo states, with nu formed against the
    demo's own next sample. Errors are |pi - u_ndi| divided by the RMS norm of
    the demo actions. Returns medians and quantiles against the true plant
    and, when ``dm`` is given, against the learned dynamics.
    """
    rng = np.random.default_rng([seed, 13])
    d = rng.integers(0, ds.N, n_pairs)
    t = rng.integers(0, ds.T - 1, n_pairs)
    x = ds.states[d, t]
    nu = virtual_input(gain, x, ds.states[d, t + 1], x, ds.dt)
    u = ctrl_forward(cm, nu, x) if not callable(cm) else cm(nu, x)
    scale = float(np.sqrt(np.mean(np.sum(ds.actions ** 2, axis=-1))))
    out = {"pairs": n_pairs, "control_scale": scale}

    def summarize(ref_u, key):
        e = np.linalg.norm(u - ref_u, axis=-1) / scale
        out[key] = {"median": float(np.median(e)), "p90": float(np.quantile(e, 0.9)),
                    "max": float(e.max())}

    summarize(ndi_oracle(plant, x, nu), "true")
    if dm is not None:
        a, g = extract_affine(dm, x)
        summarize(ndi_oracle(plant, x, nu, drift=a, input_matrix=g), "learned")
    return out


# --- behavior cloning -------------------------------------------------------

def train_bc(ds, epochs=200, batch_size=256, lr=1e-3, hidden=64, seed=0, history=None):
    """Fit u = pi(x) by squared error on the demo (state, action) pairs."""
    stats = ds.normalization()
    bc = BcModel(ds.n, ds.m, stats, hidden=hidden, seed=seed)
    x = (ds.states.reshape(-1, ds.n) - stats["state_mean"]) / stats["state_std"]
    y = (ds.actions.reshape(-1, ds.m) - stats["action_mean"]) / stats["action_std"]
    opt = OptimState.for_params(bc.params, lr)
    rng = np.random.default_rng([seed, 9])
    history = [] if history is None else history
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for i in range(0, len(x), batch_size):
            b = order[i:i + batch_size]
            tape = Tape()
            pred = bc.net.forward(Tensor(x[b]), tape)
            loss = tape.scale(tape.sum(tape.square(tape.sub(pred, y[b]))), 1.0 / len(b))
            grads = backward(tape, loss, np.array(1.0), bc.params)
            adam_step(bc.params, grads, opt, epoch)
            total += float(loss.data) * len(b)
        history.append({"epoch": epoch, "phase": "bc", "loss": total / len(x),
                        "lr": opt.lr_at(epoch)})
    bc.phase = "bc"
    bc.final_loss = history[-1]["loss"] if history else None
    return bc, history


def bc_baseline(ds, plant, refs, cfg, epochs=200, seed=0, scale=None):
    """Train a BC policy on ``ds`` and evaluate it with the rollout harness."""
    bc, history = train_bc(ds, epochs=epochs, seed=seed)
    report = evaluate(plant, BcPolicy(bc), refs, cfg, scale,
                      axes={"plant": plant.name, "controller": "bc", "gain": None})
    return bc, report, history


def write_trace(path, trace, episode=None):
    """CSV rows (episode, step, t, x..., x_r..., u..., reward)."""
    E, T1, n = trace.states.shape
    m = trace.controls.shape[-1]
    header = (["episode", "step", "t"] + [f"x{j}" for j in range(n)]
              + [f"xr{j}" for j in range(n)] + [f"u{j}" for j in range(m)] + ["reward"])
    eps = range(E) if episode is None else [episode]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for e in eps:
            for i in range(T1 - 1):
                if not trace.alive[e, i]:
                    break
                w.writerow([e, i + 1, repr((i + 1) * trace.dt)]
                           + [repr(float(v)) for v in trace.states[e, i + 1]]
                           + [repr(float(v)) for v in trace.refs[e, i + 1]]
                           + [repr(float(v)) for v in trace.controls[e, i]]
                           + [repr(float(trace.rewards[e, i]))])
