"""Checkpoint directory format.

Layout::

    <dir>/manifest.json        list of {"name", "shape", "dtype": "f32"}
    <dir>/meta.json            run metadata + per-tensor Adam step counters
    <dir>/tensors/<file>.bin   one raw little-endian binary per tensor

Adam moments ride along as extra manifest tensors named ``<name>@m`` /
``<name>@v`` so a save/load round trip is bit-exact for the optimizer state
too. Tensor names are ``<component>/<param>``.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .nets import ParamStore

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(RuntimeError):
    pass


def _dtype_tag(dt):
    dt = np.dtype(dt)
    for tag, cand in _DTYPES.items():
        if cand == dt.newbyteorder("<"):
            return tag
    raise CheckpointError(f"unsupported checkpoint dtype {dt}")


def _filename(name):
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".bin"


def save_checkpoint(path, stores: dict[str, ParamStore], meta: dict | None = None):
    """Write components to ``path`` (created if missing)."""
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    manifest = []
    files = set()
    adam_steps = {}

    def write_tensor(name, arr):
        fn = _filename(name)
        if fn in files:
            raise CheckpointError(f"tensor file collision for {name!r}")
        files.add(fn)
        le = np.ascontiguousarray(arr, dtype=np.dtype(arr.dtype).newbyteorder("<"))
        (root / "tensors" / fn).write_bytes(le.tobytes())
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": _dtype_tag(arr.dtype)})

    for comp, store in stores.items():
        for name, arr in store.items():
            full = f"{comp}/{name}"
            write_tensor(full, arr)
            write_tensor(f"{full}@m", store.m[name])
            write_tensor(f"{full}@v", store.v[name])
            adam_steps[full] = store.step[name]

    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    meta = dict(meta or {})
    meta["adam_steps"] = adam_steps
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_checkpoint(path):
    """Read a checkpoint directory; returns (stores, meta)."""
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"not a checkpoint directory: {root} ({exc})") from exc

    raw = {}
    for entry in manifest:
        name, shape, tag = entry["name"], tuple(entry["shape"]), entry["dtype"]
        data = (root / "tensors" / _filename(name)).read_bytes()
        arr = np.frombuffer(data, dtype=_DTYPES[tag]).reshape(shape)
        raw[name] = np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("=")))

    stores: dict[str, ParamStore] = {}
    adam_steps = meta.get("adam_steps", {})
    for name, arr in raw.items():
        if "@" in name:
            continue
        comp, pname = name.split("/", 1)
        store = stores.get(comp)
        if store is None:
            store = ParamStore(arr.dtype)
            stores[comp] = store
        store.add(pname, arr)
        if f"{name}@m" in raw:
            np.copyto(store.m[pname], raw[f"{name}@m"])
            np.copyto(store.v[pname], raw[f"{name}@v"])
        store.step[pname] = int(adam_steps.get(name, 0))
    return stores, meta
