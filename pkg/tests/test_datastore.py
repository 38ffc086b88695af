import os

import numpy as np
import pytest

from rmbil import datastore as store
from rmbil.evalkit import EvalReport
from rmbil.models import BcModel, CtrlModel, CvaeModel, DynModel
from rmbil.plants import gen_demos, make_plant
from rmbil.train import model_stats


@pytest.fixture(scope="module")
def ds():
    return gen_demos(make_plant("pendulum"), N=3, T=25, seed=2)


def _models(ds):
    st = model_stats(ds)
    out = [DynModel(2, 1, st, hidden=6, seed=1), CtrlModel(2, 1, st, hidden=6, seed=2),
           CvaeModel(2, st, latent=3, hidden=6, seed=3, resolution=0.2),
           BcModel(2, 1, ds.normalization(), hidden=6, seed=4)]
    for k, m in enumerate(out):
        m.phase, m.final_loss = "trained", 0.125 * k
    return out


def test_dataset_round_trip_is_bit_exact(ds, tmp_path):
    a, b = tmp_path / "a.rmbil-data.json", tmp_path / "b.rmbil-data.json"
    store.save_dataset(a, ds, config={"seed": 2})
    back = store.load_dataset(a)
    assert back.states.tobytes() == ds.states.tobytes()
    assert back.actions.tobytes() == ds.actions.tobytes()
    assert back.expert_rms == ds.expert_rms
    store.save_dataset(b, back, config={"seed": 2})
    assert a.read_bytes() == b.read_bytes()
    assert store.dataset_config(a) == {"seed": 2}


def test_manifest_keeps_collection_sizes(tmp_path):
    ds = gen_demos(make_plant("scalar"), N=50, T=1000, seed=0)
    path = tmp_path / "d.rmbil-data.json"
    store.save_dataset(path, ds)
    back = store.load_dataset(path)
    assert (back.N, back.T) == (50, 1000)


@pytest.mark.parametrize("k", range(4))
def test_checkpoint_round_trip(ds, tmp_path, k):
    model = _models(ds)[k]
    a, b = tmp_path / "a.rmbil-ckpt", tmp_path / "b.rmbil-ckpt"
    store.save_checkpoint(a, model, config={"x": 1}, seed=7, extra={"demos": 3})
    back, header = store.load_checkpoint(a, kind=model.kind)
    for p, q in zip(model.params, back.params):
        assert p.data.tobytes() == q.data.tobytes()
    assert header["seed"] == 7 and header["extra"] == {"demos": 3}
    assert back.final_loss == model.final_loss
    store.save_checkpoint(b, back, config={"x": 1}, seed=7, extra={"demos": 3})
    assert a.read_bytes() == b.read_bytes()


def test_cvae_resolution_survives(ds, tmp_path):
    cv = _models(ds)[2]
    store.save_checkpoint(tmp_path / "c.rmbil-ckpt", cv)
    back, _ = store.load_checkpoint(tmp_path / "c.rmbil-ckpt")
    assert back.resolution == 0.2


def test_kind_guard(ds, tmp_path):
    path = tmp_path / "c.rmbil-ckpt"
    store.save_checkpoint(path, _models(ds)[1])
    with pytest.raises(store.KindError):
        store.load_checkpoint(path, kind="dyn")


def test_truncated_checkpoint(ds, tmp_path):
    path = tmp_path / "c.rmbil-ckpt"
    store.save_checkpoint(path, _models(ds)[0])
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(store.TruncatedError):
        store.load_checkpoint(path)
    path.write_bytes(raw[:20])
    with pytest.raises(store.TruncatedError):
        store.load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(store.FormatError):
        store.load_checkpoint(path)


def test_version_mismatch(ds, tmp_path):
    path = tmp_path / "d.rmbil-data.json"
    store.save_dataset(path, ds)
    text = path.read_text().replace('"format_version":1', '"format_version":99')
    path.write_text(text)
    with pytest.raises(store.VersionError):
        store.load_dataset(path)


def test_truncated_and_ragged_dataset(ds, tmp_path):
    path = tmp_path / "d.rmbil-data.json"
    store.save_dataset(path, ds)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(store.TruncatedError):
        store.load_dataset(path)
    path.write_bytes(raw.replace(b'"T":25', b'"T":26'))
    with pytest.raises(store.DimensionError):
        store.load_dataset(path)


def test_report_round_trip(tmp_path):
    rep = EvalReport(axes={"gain": 0.1}, rms=np.array([0.1, 0.2]), reward=np.array([3.0, 4.0]),
                     score=np.array([0.9, 1.1]), terminated=np.array([False, True]),
                     anchors={"expert": 4.0, "random": 0.0})
    failed = EvalReport(axes={"gain": 1.0}, status="failed", error="boom")
    path = tmp_path / "r.rmbil-report.json"
    store.save_report(path, [rep, failed], config={"a": 1})
    back, doc = store.load_report(path)
    assert back[0].score.tobytes() == rep.score.tobytes()
    assert back[0].terminated.dtype == bool
    assert back[1].status == "failed" and back[1].aggregate() == {}
    store.save_report(tmp_path / "r2.rmbil-report.json", back, config={"a": 1})
    assert path.read_bytes() == (tmp_path / "r2.rmbil-report.json").read_bytes()


def test_atomic_write_leaves_no_temp_files(tmp_path):
    store.atomic_write(tmp_path / "x.txt", "hello")
    assert os.listdir(tmp_path) == ["x.txt"]


def test_history_csv(tmp_path):
    path = tmp_path / "h.csv"
    store.write_history(path, [{"epoch": 0, "phase": "p", "loss": 0.5, "lr": 0.1},
                               {"epoch": 1, "phase": "p", "loss": 0.25, "lr": 0.1,
                                "holdout": 0.3}])
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,phase,loss,lr,holdout"
    assert lines[2].endswith(",0.3")
