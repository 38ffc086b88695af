"""Analytic input-affine plants, disturbances, and closed-form control laws.

All plant functions accept batched states of shape (..., n). Three systems
are built in:

* ``scalar``: x' = -x^3 + (2 + cos x) u
* ``pendulum``: damped pendulum, state (angle, rate), torque input
* ``pointmass``: planar point mass, state (px, py, vx, vy), force input
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .odeint import FuncOde, SolverConfig, integrate

__all__ = [
    "StateOutOfDomain",
    "RankDeficientError",
    "PlantSpec",
    "DisturbanceCfg",
    "SwitchingState",
    "NOMINAL",
    "disturbed_plant",
    "expert_control",
    "make_plant",
    "PLANTS",
    "plant_deriv",
    "linear_feedback",
    "virtual_input",
    "ndi_oracle",
    "smc_oracle",
    "switching_function",
    "step_plant",
    "ExpertConfig",
    "Dataset",
    "sine_reference",
    "gen_demos",
]

log = logging.getLogger(__name__)

GRAVITY = 9.81


class StateOutOfDomain(ValueError):
    """A state left the plant's bounded domain."""


class RankDeficientError(np.linalg.LinAlgError):
    """The input matrix lost column rank, so it cannot be inverted."""


@dataclass(frozen=True)
class PlantSpec:
    name: str
    n: int
    m: int
    drift: object            # (..., n) -> (..., n)
    input_matrix: object     # (..., n) -> (..., n, m)
    low: np.ndarray
    high: np.ndarray
    dt: float
    constants: dict = field(default_factory=dict)
    # maps an input-channel bias (force/torque) to a state derivative
    disturbance_matrix: np.ndarray = None
    terrain_index: int = 0   # coordinate that indexes "uneven" segments

    def in_domain(self, x):
        x = np.asarray(x)
        return np.all((x >= self.low) & (x <= self.high), axis=-1)

    def check_domain(self, x):
        if not np.all(self.in_domain(x)):
            raise StateOutOfDomain(f"{self.name}: state outside bounds")


def _scalar(constants):
    def drift(x):
        return -x ** 3

    def input_matrix(x):
        return (2.0 + np.cos(x))[..., None]

    return dict(n=1, m=1, drift=drift, input_matrix=input_matrix,
                low=np.array([-3.0]), high=np.array([3.0]), dt=0.05,
                disturbance_matrix=np.eye(1))


def _pendulum(constants):
    mass, length = constants["mass"], constants["length"]
    damping, g = constants["damping"], constants["gravity"]
    inertia = mass * length ** 2

    def drift(x):
        theta, omega = x[..., 0], x[..., 1]
        return np.stack([omega, -(g / length) * np.sin(theta) - damping * omega], axis=-1)

    def input_matrix(x):
        col = np.zeros(x.shape[:-1] + (2, 1))
        col[..., 1, 0] = 1.0 / inertia
        return col

    return dict(n=2, m=1, drift=drift, input_matrix=input_matrix,
                low=np.array([-np.pi, -10.0]), high=np.array([np.pi, 10.0]), dt=0.05,
                disturbance_matrix=np.array([[0.0], [1.0 / inertia]]))


def _pointmass(constants):
    mass, damping, spring = constants["mass"], constants["damping"], constants["spring"]

    def drift(x):
        p, v = x[..., :2], x[..., 2:]
        return np.concatenate([v, -damping * v - spring * np.tanh(p)], axis=-1)

    def input_matrix(x):
        g = np.zeros(x.shape[:-1] + (4, 2))
        g[..., 2, 0] = g[..., 3, 1] = 1.0 / mass
        return g

    bmat = np.zeros((4, 2))
    bmat[2, 0] = bmat[3, 1] = 1.0 / mass
    return dict(n=4, m=2, drift=drift, input_matrix=input_matrix,
                low=np.array([-10.0, -10.0, -10.0, -10.0]),
                high=np.array([10.0, 10.0, 10.0, 10.0]), dt=0.02,
                disturbance_matrix=bmat)


_BUILDERS = {"scalar": _scalar, "pendulum": _pendulum, "pointmass": _pointmass}
_DEFAULT_CONSTANTS = {
    "scalar": {},
    "pendulum": {"mass": 1.0, "length": 1.0, "damping": 0.1, "gravity": GRAVITY},
    "pointmass": {"mass": 1.0, "damping": 0.1, "spring": 1.0},
}
PLANTS = tuple(_BUILDERS)


def make_plant(name, **constants):
    """Build a named plant; keyword arguments override physical constants."""
    if name not in _BUILDERS:
        raise KeyError(f"unknown plant {name!r}; choose from {PLANTS}")
    consts = dict(_DEFAULT_CONSTANTS[name])
    unknown = set(constants) - set(consts)
    if unknown:
        raise KeyError(f"unknown constants for {name}: {sorted(unknown)}")
    consts.update(constants)
    parts = _BUILDERS[name](consts)
    return PlantSpec(name=name, constants=consts,
                     terrain_index=0, **parts)


@dataclass(frozen=True)
class DisturbanceCfg:
    """Environment perturbation applied on top of the nominal plant.

    ``slope`` adds a constant input-channel bias. ``uneven`` adds a bias
    resampled on every ``span``-long stretch of the terrain coordinate, with
    magnitude drawn from ``amplitude`` and a random sign. ``param-shift``
    scales physical constants by ``1 + shift[name]``.
    """

    kind: str = "none"
    bias: tuple = ()
    span: float = 0.25
    amplitude: tuple = (0.0, 1.0)
    shift: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "slope", "uneven", "param-shift"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")

    def to_dict(self):
        return {"kind": self.kind, "bias": list(self.bias), "span": self.span,
                "amplitude": list(self.amplitude), "shift": dict(self.shift),
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], bias=tuple(d.get("bias", ())), span=d.get("span", 0.25),
                   amplitude=tuple(d.get("amplitude", (0.0, 1.0))),
                   shift=dict(d.get("shift", {})), seed=d.get("seed", 0))


NOMINAL = DisturbanceCfg()


@lru_cache(maxsize=65536)
def _segment_bias(seed, k, m, lo, hi):
    rng = np.random.default_rng([seed, k + 2 ** 31])
    mag = rng.uniform(lo, hi, size=m)
    sign = np.where(rng.random(m) < 0.5, -1.0, 1.0)
    return mag * sign


def _bias_force(p, d, x):
    """Input-channel bias for each state in ``x`` (shape (..., m))."""
    if d.kind == "slope":
        return np.broadcast_to(np.asarray(d.bias, dtype=np.float64), x.shape[:-1] + (p.m,))
    if d.kind == "uneven":
        coord = x[..., p.terrain_index]
        seg = np.floor(coord / d.span).astype(np.int64)
        out = np.empty(x.shape[:-1] + (p.m,))
        flat_seg = seg.reshape(-1)
        flat_out = out.reshape(-1, p.m)
        lo, hi = map(float, d.amplitude)
        for k in np.unique(flat_seg):
            flat_out[flat_seg == k] = _segment_bias(d.seed, int(k), p.m, lo, hi)
        return out
    return None


def disturbed_plant(p, d):
    """Plant with ``param-shift`` applied; other kinds leave it unchanged."""
    if d.kind != "param-shift":
        return p
    consts = {k: v * (1.0 + d.shift.get(k, 0.0)) for k, v in p.constants.items()}
    return replace(make_plant(p.name, **consts), dt=p.dt)


def plant_deriv(p, d, x, u, check=True):
    """x' = a(x) + G(x) u (+ disturbance)."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if check:
        p.check_domain(x)
    if not np.all(np.isfinite(u)):
        raise ValueError("control must be finite")
    q = disturbed_plant(p, d) if d.kind == "param-shift" else p
    dx = q.drift(x) + np.einsum("...nm,...m->...n", q.input_matrix(x), u)
    bias = _bias_force(p, d, x)
    if bias is not None:
        dx = dx + bias @ p.disturbance_matrix.T
    return dx


def linear_feedback(gain, x_des, x):
    """Proportional law K_n (x_des - x) with diagonal (or scalar) gain."""
    return np.asarray(gain) * (np.asarray(x_des) - np.asarray(x))


def virtual_input(gain, ref_now, ref_next, x, dt):
    """Reference rate over the coming sample plus proportional correction.

    The rate term is the finite difference of the held reference; the
    correction is :func:`linear_feedback` against the current reference.
    """
    ref_now = np.asarray(ref_now)
    return (np.asarray(ref_next) - ref_now) / dt + linear_feedback(gain, ref_now, x)


def _pinv_checked(gmat):
    s = np.linalg.svd(gmat, compute_uv=False)
    smax = s[..., :1]
    tol = max(gmat.shape[-2:]) * np.finfo(float).eps * np.maximum(smax, 1e-300)
    if np.any(s <= tol):
        raise RankDeficientError("input matrix is rank deficient")
    return np.linalg.pinv(gmat)


def ndi_oracle(p, x, nu, drift=None, input_matrix=None):
    """u = G^+(x) [nu - a(x)]; pass ``drift``/``input_matrix`` to invert a model."""
    x = np.asarray(x, dtype=np.float64)
    a = p.drift(x) if drift is None else drift
    gmat = p.input_matrix(x) if input_matrix is None else input_matrix
    return np.einsum("...mn,...n->...m", _pinv_checked(gmat), np.asarray(nu) - a)


@dataclass(frozen=True)
class SwitchingState:
    sigma: np.ndarray
    gain: np.ndarray  # diagonal of K_s

    def __post_init__(self):
        if np.any(np.asarray(self.gain) <= 0):
            raise ValueError("switching gains must be positive")


def switching_function(x_des, x, gain):
    return SwitchingState(np.asarray(x_des, dtype=np.float64) - np.asarray(x, dtype=np.float64),
                          np.asarray(gain, dtype=np.float64))


def smc_oracle(p, x, nu, sw, boundary=None, drift=None, input_matrix=None):
    """NDI plus the switching term G^+ K_s sgn(sigma).

    With ``boundary`` set, sgn is replaced by tanh(sigma / boundary).
    """
    x = np.asarray(x, dtype=np.float64)
    sgn = np.sign(sw.sigma) if boundary is None else np.tanh(sw.sigma / boundary)
    gmat = p.input_matrix(x) if input_matrix is None else input_matrix
    u_ndi = ndi_oracle(p, x, nu, drift=drift, input_matrix=gmat)
    return u_ndi + np.einsum("...mn,...n->...m", _pinv_checked(gmat), sw.gain * sgn)


def step_plant(p, d, x, u, substeps=5):
    """Advance one sample period with the control held constant."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    cfg = SolverConfig(method="rk4", h=p.dt / substeps)
    f = FuncOde(lambda t, y: plant_deriv(p, d, y, u, check=False))
    out = integrate(f, x, [0.0, p.dt], cfg)[-1]
    return out


# --- demonstrations ---------------------------------------------------------

@dataclass(frozen=True)
class ExpertConfig:
    gain: float = 5.0
    n_sines: int = 2
    amplitude: tuple = None   # per-sine amplitude range; plant default if None
    frequency: tuple = (0.5, 3.0)
    rms_bound: float = None

    def to_dict(self):
        return {"gain": self.gain, "n_sines": self.n_sines,
                "amplitude": None if self.amplitude is None else list(self.amplitude),
                "frequency": list(self.frequency), "rms_bound": self.rms_bound}

    @classmethod
    def from_dict(cls, d):
        amp = d.get("amplitude")
        return cls(gain=d.get("gain", 5.0), n_sines=d.get("n_sines", 2),
                   amplitude=None if amp is None else tuple(amp),
                   frequency=tuple(d.get("frequency", (0.5, 3.0))),
                   rms_bound=d.get("rms_bound"))


_REF_AMPLITUDE = {"scalar": (0.2, 0.4), "pendulum": (0.2, 0.4), "pointmass": (0.4, 0.8)}
_RMS_BOUND = {"scalar": 0.05, "pendulum": 0.05, "pointmass": 0.05}


def sine_reference(p, rng, cfg, t):
    """Random sum-of-sines reference sampled at ``t``; returns (len(t), n) states.

    For second-order plants the position channels carry the sines and the
    velocity channels their exact derivatives.
    """
    amp = cfg.amplitude or _REF_AMPLITUDE[p.name]
    n_pos = p.n if p.name == "scalar" else p.n // 2
    pos = np.zeros((len(t), n_pos))
    vel = np.zeros_like(pos)
    for j in range(n_pos):
        for _ in range(cfg.n_sines):
            a = rng.uniform(*amp)
            w = rng.uniform(*cfg.frequency)
            phi = rng.uniform(0.0, 2 * np.pi)
            pos[:, j] += a * np.sin(w * t + phi)
            vel[:, j] += a * w * np.cos(w * t + phi)
    if p.name == "scalar":
        return pos
    return np.concatenate([pos, vel], axis=-1)


@dataclass
class Dataset:
    plant: str
    dt: float
    states: np.ndarray    # (N, T, n)
    actions: np.ndarray   # (N, T, m)
    contexts: np.ndarray  # (N, n)
    seed: int = 0
    expert: dict = field(default_factory=dict)
    expert_rms: float = float("nan")
    regenerated: int = 0

    @property
    def n(self):
        return self.states.shape[-1]

    @property
    def m(self):
        return self.actions.shape[-1]

    @property
    def N(self):
        return self.states.shape[0]

    @property
    def T(self):
        return self.states.shape[1]

    def subset(self, k):
        if not 1 <= k <= self.N:
            raise ValueError(f"subset size {k} outside 1..{self.N}")
        return Dataset(self.plant, self.dt, self.states[:k], self.actions[:k],
                       self.contexts[:k], self.seed, dict(self.expert), self.expert_rms,
                       self.regenerated)

    def normalization(self):
        x = self.states.reshape(-1, self.n)
        u = self.actions.reshape(-1, self.m)
        rate = (np.diff(self.states, axis=1) / self.dt).reshape(-1, self.n)
        return {
            "state_mean": x.mean(0), "state_std": np.maximum(x.std(0), 1e-6),
            "action_mean": u.mean(0), "action_std": np.maximum(u.std(0), 1e-6),
            "rate_mean": rate.mean(0), "rate_std": np.maximum(rate.std(0), 1e-6),
        }


def expert_control(p, x, ref_now, ref_next, gain):
    nu = virtual_input(gain, ref_now, ref_next, x, p.dt)
    return ndi_oracle(p, x, nu)


def _one_demo(p, cfg, T, rng):
    t = p.dt * np.arange(T + 1)
    ref = sine_reference(p, rng, cfg, t)
    x = ref[0].copy()
    states = np.empty((T, p.n))
    actions = np.empty((T, p.m))
    for i in range(T):
        states[i] = x
        u = expert_control(p, x, ref[i], ref[i + 1], cfg.gain)
        actions[i] = u
        x = step_plant(p, NOMINAL, x, u)
        if not p.in_domain(x):
            return None
    rms = float(np.sqrt(np.mean(np.sum((states - ref[:T]) ** 2, axis=-1))))
    return states, actions, rms


def gen_demos(p, expert=ExpertConfig(), N=50, T=1000, seed=0, max_retries=100):
    """Expert NDI demonstrations tracking random smooth references."""
    if N < 1 or T < 2:
        raise ValueError("need N >= 1 and T >= 2")
    bound = expert.rms_bound if expert.rms_bound is not None else _RMS_BOUND[p.name]
    states = np.empty((N, T, p.n))
    actions = np.empty((N, T, p.m))
    rms_all = []
    regenerated = 0
    for k in range(N):
        attempt = 0
        while True:
            rng = np.random.default_rng([seed, k, attempt])
            demo = _one_demo(p, expert, T, rng)
            if demo is not None and demo[2] <= bound:
                break
            attempt += 1
            regenerated += 1
            if attempt > max_retries:
                raise RuntimeError(f"expert failed on demo {k} after {max_retries} retries")
        states[k], actions[k], rms = demo
        rms_all.append(rms)
    if regenerated:
        log.info("regenerated %d diverged demonstrations", regenerated)
    return Dataset(plant=p.name, dt=p.dt, states=states, actions=actions,
                   contexts=states[:, 0].copy(), seed=seed,
                   expert={**expert.to_dict(), "rms_bound": bound},
                   expert_rms=float(np.sqrt(np.mean(np.square(rms_all)))),
                   regenerated=regenerated)
