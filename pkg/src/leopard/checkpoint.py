"""Checkpoint archive: a zip mapping parameter paths to little-endian
float payloads, with a JSON header carrying shapes, the config hash and
the RNG seed. Entry order and timestamps are fixed so identical state
serializes to identical bytes."""

import hashlib
import io
import json
import zipfile

import numpy as np

from .autodiff import Tensor

_EPOCH = (1980, 1, 1, 0, 0, 0)


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_entry(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def serialize_params(params):
    """Deterministic bytes for a path -> Tensor/array dict (no header)."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for path in sorted(params):
            t = params[path]
            arr = t.data if isinstance(t, Tensor) else np.asarray(t)
            _write_entry(zf, f"params/{path}", arr.astype("<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, params, config=None, seed=None, extra=None):
    """`params`: path -> Tensor; `extra`: path -> ndarray (e.g. optimizer state)."""
    config = config or {}
    header = {
        "config_hash": config_hash(config),
        "config": config,
        "seed": seed,
        "params": {},
        "extra": {},
    }
    entries = []
    for name, t in sorted(params.items()):
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        header["params"][name] = list(arr.shape)
        entries.append((f"params/{name}", np.asarray(arr).astype("<f8").tobytes()))
    for name, arr in sorted((extra or {}).items()):
        arr = np.asarray(arr, dtype=np.float64)
        header["extra"][name] = list(arr.shape)
        entries.append((f"extra/{name}", arr.astype("<f8").tobytes()))
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "header.json", json.dumps(header, sort_keys=True).encode())
        for name, payload in entries:
            _write_entry(zf, name, payload)


def load_checkpoint(path):
    """Returns (params: path -> Tensor, extra: path -> ndarray, header dict)."""
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        params, extra = {}, {}
        for name, shape in header["params"].items():
            arr = np.frombuffer(zf.read(f"params/{name}"), dtype="<f8").reshape(shape)
            params[name] = Tensor(np.array(arr), requires_grad=True, name=name)
        for name, shape in header["extra"].items():
            extra[name] = np.frombuffer(zf.read(f"extra/{name}"), dtype="<f8").reshape(shape).copy()
    return params, extra, header
