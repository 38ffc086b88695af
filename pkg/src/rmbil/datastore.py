"""Versioned on-disk formats for datasets, checkpoints and reports.

* ``.rmbil-data.json``: JSON manifest plus one record per trajectory. Floats
  are written with Python's shortest round-trip repr, so reloading gives the
  same bits.
* ``.rmbil-ckpt``: a magic line, an 8-byte little-endian header length, a
  JSON header, then every tensor as little-endian float64 at the offsets
  listed in the header.
* ``.rmbil-report.json``: evaluation reports with the config that made them.

Every write goes to a temporary file in the target directory and is renamed
into place.
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile

import numpy as np

from .models import BcModel, CtrlModel, CvaeModel, DynModel
from .plants import Dataset

__all__ = [
    "FORMAT_VERSION",
    "FormatError",
    "VersionError",
    "TruncatedError",
    "KindError",
    "DimensionError",
    "atomic_write",
    "save_dataset",
    "load_dataset",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_header",
    "dataset_config",
    "save_report",
    "load_report",
    "write_history",
]

FORMAT_VERSION = 1
CKPT_MAGIC = b"RMBIL-CKPT\n"
DATA_SUFFIX = ".rmbil-data.json"
CKPT_SUFFIX = ".rmbil-ckpt"
REPORT_SUFFIX = ".rmbil-report.json"


class FormatError(ValueError):
    """File does not match the expected layout."""


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class KindError(FormatError):
    """File holds a different kind of object than requested."""


class DimensionError(FormatError):
    pass


def atomic_write(path, data):
    """Write bytes or text to ``path`` via temp file + rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _dumps(obj):
    return json.dumps(obj, indent=None, separators=(",", ":"), sort_keys=True) + "\n"


def _check_version(meta, what):
    v = meta.get("format_version")
    if v != FORMAT_VERSION:
        raise VersionError(f"{what}: format_version {v!r}, expected {FORMAT_VERSION}")


def _check_kind(found, expected, what):
    if expected is not None and found != expected:
        raise KindError(f"{what}: holds kind {found!r}, expected {expected!r}")


# --- datasets ---------------------------------------------------------------

def _stats_lists(stats):
    return {k: np.asarray(v).tolist() for k, v in stats.items()}


def save_dataset(path, ds, config=None):
    """Write ``ds`` with its manifest; ``config`` is echoed verbatim."""
    manifest = {
        "format_version": FORMAT_VERSION, "kind": "dataset",
        "plant": ds.plant, "dt": ds.dt, "n": ds.n, "m": ds.m, "N": ds.N, "T": ds.T,
        "seed": ds.seed, "expert": ds.expert, "expert_rms": ds.expert_rms,
        "regenerated": ds.regenerated,
        "normalization": _stats_lists(ds.normalization()),
        "config": config or {},
    }
    records = [{"id": k, "s": ds.contexts[k].tolist(), "states": ds.states[k].tolist(),
                "actions": ds.actions[k].tolist()} for k in range(ds.N)]
    return atomic_write(path, _dumps({"manifest": manifest, "trajectories": records}))


def _array(rows, shape, what):
    try:
        arr = np.array(rows, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DimensionError(f"{what}: ragged or non-numeric array") from exc
    if arr.shape != shape:
        raise DimensionError(f"{what}: shape {arr.shape}, manifest says {shape}")
    return arr


def load_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise TruncatedError(f"{path}: not a complete JSON document ({exc})") from exc
    if not isinstance(doc, dict) or "manifest" not in doc:
        raise FormatError(f"{path}: no manifest")
    man = doc["manifest"]
    _check_version(man, path)
    _check_kind(man.get("kind"), "dataset", path)
    recs = doc.get("trajectories", [])
    N, T, n, m = man["N"], man["T"], man["n"], man["m"]
    if len(recs) != N:
        raise DimensionError(f"{path}: {len(recs)} trajectories, manifest says {N}")
    states = np.empty((N, T, n))
    actions = np.empty((N, T, m))
    contexts = np.empty((N, n))
    for k, r in enumerate(recs):
        if r.get("id") != k:
            raise FormatError(f"{path}: trajectory {k} has id {r.get('id')!r}")
        states[k] = _array(r["states"], (T, n), f"trajectory {k} states")
        actions[k] = _array(r["actions"], (T, m), f"trajectory {k} actions")
        contexts[k] = _array(r["s"], (n,), f"trajectory {k} context")
    return Dataset(plant=man["plant"], dt=man["dt"], states=states, actions=actions,
                   contexts=contexts, seed=man["seed"], expert=man["expert"],
                   expert_rms=man["expert_rms"], regenerated=man.get("regenerated", 0))


def dataset_config(path):
    """The config echoed into a dataset file."""
    with open(path, "rb") as fh:
        return json.loads(fh.read())["manifest"].get("config", {})


# --- checkpoints -------------------------------------------------------------

def _model_tensors(model):
    named = []
    for key in sorted(model.stats):
        named.append((f"stats.{key}", np.asarray(model.stats[key], dtype=np.float64)))
    for p in model.params:
        named.append((p.name, p.data))
    return named


def _model_meta(model):
    meta = {"kind": model.kind, "n": model.n, "phase": model.phase,
            "final_loss": model.final_loss}
    if model.kind == "dyn":
        meta.update(m=model.m, structure=model.structure, hidden=model.nets[0].hidden)
    elif model.kind == "ctrl":
        meta.update(m=model.m, hidden=model.net.hidden)
    elif model.kind == "cvae":
        meta.update(latent=model.latent, hidden=model.encoder.hidden,
                    resolution=model.resolution)
    elif model.kind == "bc":
        meta.update(m=model.m, hidden=model.net.hidden)
    else:
        raise KindError(f"cannot checkpoint model kind {model.kind!r}")
    return meta


def save_checkpoint(path, model, config=None, seed=None, extra=None):
    """Header + little-endian float64 blob; see the module docstring."""
    tensors, blob, offset = [], io.BytesIO(), 0
    for name, arr in _model_tensors(model):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(data)})
        blob.write(data)
        offset += len(data)
    header = {"format_version": FORMAT_VERSION, **_model_meta(model),
              "tensors": tensors, "blob_bytes": offset, "config": config or {},
              "seed": seed, "extra": extra or {}}
    hbytes = _dumps(header).encode("utf-8")
    payload = CKPT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + blob.getvalue()
    return atomic_write(path, payload)


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    return _parse_checkpoint(raw, path)[0]


def _parse_checkpoint(raw, path):
    if not raw.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint file")
    pos = len(CKPT_MAGIC)
    if len(raw) < pos + 8:
        raise TruncatedError(f"{path}: header length missing")
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise TruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(raw[pos:pos + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: unreadable header") from exc
    _check_version(header, path)
    blob = raw[pos + hlen:]
    if len(blob) != header["blob_bytes"]:
        raise TruncatedError(f"{path}: blob has {len(blob)} bytes, header says "
                             f"{header['blob_bytes']}")
    return header, blob


def _build_model(header, stats):
    kind, n = header["kind"], header["n"]
    if kind == "dyn":
        return DynModel(n, header["m"], stats, hidden=header["hidden"],
                        structure=header["structure"])
    if kind == "ctrl":
        return CtrlModel(n, header["m"], stats, hidden=header["hidden"])
    if kind == "cvae":
        return CvaeModel(n, stats, latent=header["latent"], hidden=header["hidden"],
                         resolution=header["resolution"])
    if kind == "bc":
        return BcModel(n, header["m"], stats, hidden=header["hidden"])
    raise KindError(f"unknown model kind {kind!r}")


def load_checkpoint(path, kind=None):
    """Rebuild the saved model; ``kind`` guards against loading the wrong one.

    Returns (model, header).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    header, blob = _parse_checkpoint(raw, path)
    _check_kind(header.get("kind"), kind, path)
    arrays = {}
    for t in header["tensors"]:
        start, size = t["offset"], t["nbytes"]
        count = int(np.prod(t["shape"], dtype=np.int64))
        if size != 8 * count or start + size > len(blob):
            raise DimensionError(f"{path}: tensor {t['name']} does not fit its shape")
        arrays[t["name"]] = np.frombuffer(blob, dtype="<f8", count=count,
                                          offset=start).reshape(t["shape"]).astype(np.float64)
    stats = {k[len("stats."):]: v for k, v in arrays.items() if k.startswith("stats.")}
    model = _build_model(header, stats)
    for p in model.params:
        if p.name not in arrays:
            raise FormatError(f"{path}: missing tensor {p.name}")
        if arrays[p.name].shape != p.data.shape:
            raise DimensionError(f"{path}: tensor {p.name} has shape "
                                 f"{arrays[p.name].shape}, model expects {p.data.shape}")
        p.data = arrays[p.name].copy()
    model.phase = header["phase"]
    model.final_loss = header["final_loss"]
    return model, header


# --- reports ----------------------------------------------------------------

def save_report(path, reports, config=None, extra=None):
    doc = {"format_version": FORMAT_VERSION, "kind": "report", "config": config or {},
           "reports": [r.to_dict() for r in reports], "extra": extra or {}}
    return atomic_write(path, _dumps(doc))


def load_report(path):
    """Returns (list of EvalReport, document)."""
    from .evalkit import EvalReport
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise TruncatedError(f"{path}: not a complete JSON document") from exc
    _check_version(doc, path)
    _check_kind(doc.get("kind"), "report", path)
    return [EvalReport.from_dict(d) for d in doc["reports"]], doc


def write_history(path, history):
    """Loss CSV with columns epoch, phase, loss, lr (plus any extras)."""
    keys = ["epoch", "phase", "loss", "lr"]
    for row in history:
        keys += [k for k in row if k not in keys]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for row in history:
        w.writerow([repr(row[k]) if isinstance(row.get(k), float) else row.get(k, "")
                    for k in keys])
    return atomic_write(path, buf.getvalue())
