"""Acceptance criteria C1-C8, each printed as one PASS/FAIL line.

The trained models come from ``_pipeline`` (P1 = scalar plant, P2 =
pendulum; 50 demos of 200 steps, seed 0).
"""
import time
from dataclasses import replace

import numpy as np
import pytest

import _pipeline as pipe
from rmbil import datastore as store
from rmbil.diffcore import Mlp, Tape, Tensor, backward
from rmbil.evalkit import (BcPolicy, NdiPolicy, RolloutCfg, cvae_references,
                           default_disturbances, evaluate, prop1_check, robustness_sweep)
from rmbil.models import extract_affine
from rmbil.odeint import FuncOde, OdeFunc, SolverConfig, direct_grad, integrate, integrate_with_grad
from rmbil.plants import make_plant, ndi_oracle
from rmbil.train import controller_window_loss, cvae_converged, make_windows, split_demos

ROLL = RolloutCfg(gain=0.1, steps=199, episodes=50, seed=0)


@pytest.fixture
def report(capsys):
    def emit(tag, ok, detail):
        with capsys.disabled():
            print(f"\n{tag} {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return emit


# --- C1 ---------------------------------------------------------------------

class _MlpOde(OdeFunc):
    def __init__(self, seed):
        self.net = Mlp(2, 2, hidden=6, seed=seed, out_scale=0.5)
        self.params = self.net.params

    def rhs(self, t, x, seg=None):
        return self.net.reference_forward(x)

    def vjp(self, t, x, a, seg=None):
        tape = Tape()
        xt = Tensor(x)
        g = backward(tape, self.net.forward(xt, tape), a, [xt] + self.params)
        return g[0], g[1:]

    def rhs_tensor(self, t, x, tape, seg=None):
        return self.net.forward(x, tape)


def _c1_gradients(seed):
    rng = np.random.default_rng(seed)
    f = _MlpOde(seed)
    x0 = rng.normal(size=(2, 2)) * 0.5
    t = np.linspace(0.0, 0.2, 5)
    cfg = SolverConfig(h=0.05)
    target = rng.normal(size=(5, 2, 2))

    def loss():
        return 0.5 * float(np.sum((integrate(f, x0, t, cfg) - target) ** 2))

    lg = integrate(f, x0, t, cfg) - target
    ga, _, _ = integrate_with_grad(f, x0, t, cfg, lg)
    gd, _ = direct_grad(f, x0, t, cfg, lg)
    flat_a = np.concatenate([g.ravel() for g in ga])
    flat_d = np.concatenate([g.ravel() for g in gd])
    fd = []
    for p in f.params:
        for idx in np.ndindex(p.data.shape):
            old = p.data[idx]
            p.data[idx] = old + 1e-6
            up = loss()
            p.data[idx] = old - 1e-6
            down = loss()
            p.data[idx] = old
            fd.append((up - down) / 2e-6)
    fd = np.array(fd)
    rel_fd = np.max(np.abs(flat_a - fd)) / np.max(np.abs(fd))
    rel_direct = np.max(np.abs(flat_a - flat_d)) / np.max(np.abs(flat_d))
    return rel_fd, rel_direct


def test_c1_solver_and_gradient_core(report):
    start = time.time()
    decay = FuncOde(lambda t, x: -x)
    err = abs(integrate(decay, np.array([1.0]), [0.0, 1.0], SolverConfig(h=0.01))[-1, 0]
              - np.exp(-1.0))
    errs = [abs(integrate(decay, np.array([1.0]), [0.0, 1.0], SolverConfig(h=h))[-1, 0]
                - np.exp(-1.0)) for h in (0.1, 0.05, 0.025, 0.0125)]
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    grads = np.array([_c1_gradients(s) for s in range(20)])
    elapsed = time.time() - start
    ok = (err < 1e-6 and np.all((ratios >= 12) & (ratios <= 20))
          and grads[:, 0].max() < 1e-3 and grads[:, 1].max() < 1e-3 and elapsed < 60)
    assert report("C1", ok, f"rk4 err={err:.2e} ratios={np.round(ratios, 2).tolist()} "
                  f"adj-vs-fd={grads[:, 0].max():.2e} adj-vs-direct={grads[:, 1].max():.2e} "
                  f"time={elapsed:.1f}s")


# --- C2 ---------------------------------------------------------------------

def _g_error(name):
    ds = pipe.demos(name)
    dm, _ = pipe.dynamics(name)
    p = make_plant(name)
    _, hold = split_demos(ds, 0.1)
    rng = np.random.default_rng([0, 21])
    states = ds.states[hold].reshape(-1, ds.n)
    x = states[rng.choice(len(states), 100, replace=False)]
    _, g_hat = extract_affine(dm, x)
    g = p.input_matrix(x)
    rel = np.linalg.norm(g_hat - g, axis=(-2, -1)) / np.linalg.norm(g, axis=(-2, -1))
    return dm.final_loss, rel


@pytest.mark.parametrize("name", ["scalar", "pendulum"])
def test_c2_dynamics(report, name):
    start = time.time()
    pipe.dynamics(name)
    elapsed = time.time() - start
    loss, rel = _g_error(name)
    ok = loss < 0.01 and rel.max() < 0.10 and elapsed < 15 * 60
    assert report(f"C2[{name}]", ok, f"held-out loss={loss:.2e} G rel err median="
                  f"{np.median(rel):.3f} max={rel.max():.3f} time={elapsed:.0f}s")


# --- C3 ---------------------------------------------------------------------

def test_c3_oracle_fixed_point(report):
    ds = pipe.demos("scalar")
    dm, _ = pipe.dynamics("scalar")
    p = make_plant("scalar")
    start = time.time()

    def oracle(nu, x):
        a, g = extract_affine(dm, x)
        return ndi_oracle(p, x, nu, drift=a, input_matrix=g)

    windows = make_windows(ds, pipe.CFG.tau, split_demos(ds, 0.1)[0])
    loss = controller_window_loss(dm, None, ds, windows, pipe.CFG.tau,
                                  SolverConfig(h=ds.dt), pipe.CFG.gain, policy=oracle)
    elapsed = time.time() - start
    ok = loss < pipe.CFG.eps and elapsed < 60
    assert report("C3", ok, f"oracle phase-2 loss={loss:.2e} eps={pipe.CFG.eps} "
                  f"time={elapsed:.1f}s")


# --- C4 ---------------------------------------------------------------------

def test_c4_proposition_one(report):
    ds = pipe.demos("scalar")
    dm, _ = pipe.dynamics("scalar")
    cm, hist = pipe.controller("scalar")
    out = prop1_check(cm, make_plant("scalar"), ds, dm=dm, gain=pipe.CFG.gain, n_pairs=1000)
    ok = out["true"]["median"] < 0.10 and out["learned"]["median"] < 0.05
    assert report("C4", ok, f"median rel err vs true NDI={out['true']['median']:.3f} "
                  f"vs learned NDI={out['learned']['median']:.3f} epochs={len(hist)}")


# --- C5 / C6 ----------------------------------------------------------------

def _sweep(gains, controllers):
    p = make_plant("scalar")
    dists = default_disturbances(p)
    return robustness_sweep(p, controllers, pipe.test_refs("scalar"),
                            {k: dists[k] for k in ("nominal", "slope", "uneven")},
                            gains, ROLL, pipe.state_scale("scalar"))


def _means(reports):
    return {(r.axes["disturbance"], r.axes["controller"], r.axes["gain"]):
            r.aggregate()["score"]["mean"] for r in reports if r.status == "ok"}


def test_c5_robustness_direction(report):
    dt = make_plant("scalar").dt
    cm, _ = pipe.controller("scalar")
    cr, _ = pipe.robust("scalar")
    bc, _ = pipe.bc("scalar")
    ctrls = {"controller": ((lambda g: NdiPolicy(cm, g, dt)), True),
             "robust": ((lambda g: NdiPolicy(cr, g, dt)), True),
             "bc": ((lambda g: BcPolicy(bc)), False)}
    s = _means(_sweep([0.1], ctrls))
    ok = True
    parts = []
    for d in ("slope", "uneven"):
        r = s[(d, "robust", 0.1)]
        for other in (s[(d, "controller", 0.1)], s[(d, "bc", None)]):
            ok &= (r - other) >= 0.2 * abs(other)
        parts.append(f"{d}: robust={r:.3f} unrefined={s[(d, 'controller', 0.1)]:.3f} "
                     f"bc={s[(d, 'bc', None)]:.3f}")
    rn, un = s[("nominal", "robust", 0.1)], s[("nominal", "controller", 0.1)]
    gap = abs(rn - un) / abs(un)
    ok &= gap < 0.05
    parts.append(f"nominal: robust={rn:.3f} unrefined={un:.3f} gap={gap:.3f}")
    assert report("C5", ok, "; ".join(parts))


def test_c6_gain_monotonicity(report):
    dt = make_plant("scalar").dt
    cr, _ = pipe.robust("scalar")
    reps = _sweep([0.1, 1.0, 10.0], {"robust": ((lambda g: NdiPolicy(cr, g, dt)), True)})
    med = [r.aggregate()["rms"]["median"] for r in reps if r.axes["disturbance"] == "slope"]
    ok = len(med) == 3 and all(b <= a for a, b in zip(med, med[1:]))
    assert report("C6", ok, f"median rms under slope at K=0.1/1/10: "
                  f"{', '.join(f'{m:.4f}' for m in med)}")


# --- C7 ---------------------------------------------------------------------

def test_c7_cvae_closed_loop(report):
    p = make_plant("scalar")
    cv, hist = pipe.cvae("scalar")
    cr, _ = pipe.robust("scalar")
    x0 = pipe.test_demos("scalar").states[:, 0]
    refs = cvae_references(cv, x0, ROLL.steps, seed=ROLL.seed)
    rc = replace(ROLL, source="cvae")
    rep = evaluate(p, NdiPolicy(cr, rc.gain, p.dt), refs, rc, pipe.state_scale("scalar"))
    score = rep.aggregate()["score"]["mean"]
    conv = cvae_converged(hist)
    ok = score >= 0.8 and conv
    assert report("C7", ok, f"score={score:.3f} converged={conv} epochs={len(hist)} "
                  f"rec={hist[-1]['reconstruction']:.3f} kl={hist[-1]['kl']:.3f}")


# --- C8 ---------------------------------------------------------------------

def test_c8_determinism_and_persistence(report, tmp_path, capsys):
    from rmbil.cli import main
    fast = ["--set", "train.tau=4", "--set", "train.max_epochs=2", "--set",
            "train.cvae_epochs=3", "--set", "train.robust_epochs=1",
            "--set", "model.bc_epochs=2", "--set", "rollout.episodes=4",
            "--set", "rollout.steps=30"]
    steps = [["gen-demos", "--plant", "pendulum", "--n", "6", "--t", "40"],
             ["train-dynamics"] + fast, ["train-controller"] + fast,
             ["refine-robust"] + fast, ["train-cvae"] + fast,
             ["rollout", "--plant", "pendulum"] + fast,
             ["evaluate", "--plant", "pendulum", "--bc"] + fast, ["report"]]
    codes = []
    for run in ("a", "b"):
        for argv in steps:
            codes.append(main([argv[0], "--out", str(tmp_path / run)] + argv[1:]))
    capsys.readouterr()
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
               for n in names)
    # trained P1 models and the dataset round-trip bit-exactly
    trips = []
    for key, model in (("dyn", pipe.dynamics("scalar")[0]), ("ctrl", pipe.robust("scalar")[0]),
                       ("cvae", pipe.cvae("scalar")[0])):
        path = tmp_path / f"{key}.rmbil-ckpt"
        store.save_checkpoint(path, model, seed=0)
        back, _ = store.load_checkpoint(path, kind=key)
        trips.append(all(p.data.tobytes() == q.data.tobytes()
                         for p, q in zip(model.params, back.params)))
    ds = pipe.demos("scalar")
    store.save_dataset(tmp_path / "d.rmbil-data.json", ds)
    back = store.load_dataset(tmp_path / "d.rmbil-data.json")
    trips.append(back.states.tobytes() == ds.states.tobytes()
                 and back.actions.tobytes() == ds.actions.tobytes())
    ok = all(c == 0 for c in codes) and same and all(trips)
    assert report("C8", ok, f"commands ok={all(c == 0 for c in codes)} files={len(names)} "
                  f"byte-identical={same} round-trips={trips}")
