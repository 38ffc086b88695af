"""Behaviour of the trained P1/P2 models (slow; shares ``_pipeline``)."""
from functools import lru_cache

import numpy as np
import pytest

import _pipeline as pipe
from rmbil.evalkit import BcPolicy, NdiPolicy, default_disturbances, robustness_sweep
from rmbil.evalkit import RolloutCfg
from rmbil.models import ctrl_forward, cvae_generate, dyn_forward, extract_affine
from rmbil.plants import NOMINAL, make_plant, ndi_oracle, plant_deriv
from rmbil.train import split_demos

ROLL = RolloutCfg(gain=0.1, steps=199, episodes=50, seed=0)


def _held_out(name):
    ds = pipe.demos(name)
    _, hold = split_demos(ds, 0.1)
    return ds.states[hold].reshape(-1, ds.n), ds.actions[hold].reshape(-1, ds.m)


def test_p1_dynamics_matches_plant_on_held_out_states():
    dm, _ = pipe.dynamics("scalar")
    x, u = _held_out("scalar")
    f = plant_deriv(make_plant("scalar"), NOMINAL, x, u)
    err = np.sqrt(np.mean((dyn_forward(dm, x, u) - f) ** 2)) / np.sqrt(np.mean(f ** 2))
    assert err < 0.05


def test_p1_input_gain_at_origin():
    dm, _ = pipe.dynamics("scalar")
    _, g = extract_affine(dm, np.zeros((1, 1)))
    assert abs(g[0, 0, 0] - 3.0) / 3.0 < 0.10


def test_p2_unactuated_row():
    dm, _ = pipe.dynamics("pendulum")
    x, _ = _held_out("pendulum")
    _, g = extract_affine(dm, x)
    assert np.max(np.abs(g[:, 0, 0])) < 0.1


def test_controller_at_equilibrium_with_zero_virtual_input():
    p = make_plant("scalar")
    cm, _ = pipe.controller("scalar")
    ds = pipe.demos("scalar")
    x = np.zeros((1, 1))
    u = ctrl_forward(cm, np.zeros((1, 1)), x)
    u_star = ndi_oracle(p, x, np.zeros((1, 1)))
    scale = np.sqrt(np.mean(ds.actions ** 2))
    assert np.abs(u - u_star).max() < 0.1 * scale


def test_cvae_one_step_prediction():
    cv, _ = pipe.cvae("scalar")
    ds = pipe.demos("scalar")
    prev, nxt = ds.states[:, :-1].reshape(-1, 1), ds.states[:, 1:].reshape(-1, 1)
    pred = cvae_generate(cv, prev, seed=0)
    delta_rms = np.sqrt(np.mean((nxt - prev) ** 2))
    assert np.median(np.abs(pred - nxt)) < 2 * delta_rms


def test_cvae_chain_stays_in_bounds():
    cv, _ = pipe.cvae("scalar")
    p = make_plant("scalar")
    x = pipe.demos("scalar").states[:, 0]
    rng = np.random.default_rng(0)
    for _ in range(200):
        x = cvae_generate(cv, x, rng=rng)
        assert np.all(p.in_domain(x))


def test_cvae_losses_against_data_statistics():
    cv, hist = pipe.cvae("scalar")
    ds = pipe.demos("scalar")
    delta = np.diff(ds.states, axis=1).reshape(-1, 1) / cv.step_scale()
    assert np.isfinite(hist[-1]["kl"])
    # reconstruction is half the mean squared residual in decoder units
    assert 2 * hist[-1]["reconstruction"] < np.var(delta)


@lru_cache(maxsize=None)
def _scores():
    p = make_plant("scalar")
    cm, _ = pipe.controller("scalar")
    cr, _ = pipe.robust("scalar")
    bc, _ = pipe.bc("scalar")
    ctrls = {"controller": ((lambda g: NdiPolicy(cm, g, p.dt)), True),
             "robust": ((lambda g: NdiPolicy(cr, g, p.dt)), True),
             "bc": ((lambda g: BcPolicy(bc)), False)}
    dists = default_disturbances(p)
    reps = robustness_sweep(p, ctrls, pipe.test_refs("scalar"),
                            {k: dists[k] for k in ("nominal", "slope", "uneven")},
                            [0.1, 1.0, 10.0], ROLL, pipe.state_scale("scalar"))
    assert all(r.status == "ok" for r in reps)
    return {(r.axes["disturbance"], r.axes["controller"], r.axes["gain"]):
            r.aggregate()["score"]["mean"] for r in reps}


def test_trained_controller_nominal_score():
    assert _scores()[("nominal", "controller", 0.1)] >= 0.9


@pytest.mark.parametrize("gain", [0.1, 1.0, 10.0])
def test_refinement_costs_little_on_nominal_plant(gain):
    s = _scores()
    r, n = s[("nominal", "robust", gain)], s[("nominal", "controller", gain)]
    assert abs(r - n) / abs(n) < 0.05


def test_refinement_helps_on_uneven_terrain():
    s = _scores()
    assert s[("uneven", "robust", 0.1)] > s[("uneven", "controller", 0.1)]


def test_bc_nominal_score():
    assert _scores()[("nominal", "bc", None)] >= 0.9


def test_bc_degrades_more_than_refined_controller():
    s = _scores()
    bc_drop = s[("nominal", "bc", None)] - s[("uneven", "bc", None)]
    robust_drop = s[("nominal", "robust", 0.1)] - s[("uneven", "robust", 0.1)]
    assert bc_drop > 0.1
    assert robust_drop < bc_drop
