"""Tensor container: a JSON manifest plus one little-endian blob file.

Layout of a container directory::

    tensors.bin     concatenated little-endian arrays
    manifest.json   {"version", "kind", "meta", "tensors": [{name, shape, dtype, offset, nbytes}]}

Model weights are stored as float32. Gaussian statistics are stored as float64
so that mean and covariance round-trip exactly. The manifest is written last
via an atomic rename, so a directory with a manifest is always complete.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError

FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def save_tensors(directory, tensors: dict, kind: str, meta: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest_path = d / "manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        dtype = "float64" if arr.dtype == np.float64 else "float32"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    _atomic_write(d / "tensors.bin", b"".join(chunks))
    manifest = {"version": FORMAT_VERSION, "kind": kind, "meta": meta or {}, "tensors": entries}
    _atomic_write(manifest_path, json.dumps(manifest, indent=2, sort_keys=True).encode())
    return manifest_path


def load_tensors(directory, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no tensor manifest in {d}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported container version {manifest.get('version')}")
    if kind is not None and manifest.get("kind") != kind:
        raise ConfigError(f"container holds {manifest.get('kind')!r}, expected {kind!r}")
    blob = (d / "tensors.bin").read_bytes()
    out = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return out, manifest


# --------------------------------------------------------------------------
# backbone


def save_backbone(backbone, directory, meta: dict | None = None) -> Path:
    info = {"encoder": backbone.cfg.to_dict(), "weights_hash": backbone.weights_hash(), **(meta or {})}
    return save_tensors(directory, backbone.state_dict(), "backbone", info)


def load_backbone(directory):
    from .towers import Backbone, EncoderConfig

    arrays, manifest = load_tensors(directory, "backbone")
    cfg = EncoderConfig(**manifest["meta"]["encoder"])
    backbone = Backbone(cfg)
    backbone.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    backbone.freeze()
    expected = manifest["meta"].get("weights_hash")
    if expected and backbone.weights_hash() != expected:
        raise ConfigError("backbone weights do not match the manifest hash")
    return backbone, manifest


# --------------------------------------------------------------------------
# COMM state


def save_comm(model, directory) -> Path:
    tensors, states = {}, []
    for m, st in model.states.items():
        for key in ("prompt_P", "prompt_Q", "head_delta"):
            val = getattr(st, key)
            if val is not None:
                tensors[f"{m}/{key}"] = val.detach().to(torch.float32)
        tensors[f"{m}/raw/mean"] = st.raw_stats.mean
        tensors[f"{m}/raw/cov"] = st.raw_stats.covariance
        for cid, g in st.class_stats.items():
            tensors[f"{m}/class{cid}/mean"] = g.mean
            tensors[f"{m}/class{cid}/cov"] = g.covariance
        states.append({
            "modality": m,
            "raw_count": st.raw_stats.count,
            "class_counts": {str(c): g.count for c, g in st.class_stats.items()},
            "registry": [[c, list(tok)] for c, tok in st.registry],
            "tasks_completed": st.tasks_completed,
        })
    gate = None
    if model.gate is not None:
        tensors["gate/weight"] = model.gate.weight.value.detach()
        tensors["gate/bias"] = model.gate.bias.value.detach()
        gate = {"modalities": model.gate.modalities}
    meta = {"states": states, "gate": gate, "seed": model.seed}
    return save_tensors(directory, tensors, "comm", meta)


def load_comm(directory, backbone, config=None):
    from . import numerics as nx
    from .comm import CommModel, ModalityState, RelevanceGate

    arrays, manifest = load_tensors(directory, "comm")
    meta = manifest["meta"]
    model = CommModel(backbone, config, meta.get("seed", 0))

    def tensor(name):
        return torch.from_numpy(arrays[name]).to(model.dtype) if name in arrays else None

    for s in meta["states"]:
        m = s["modality"]
        raw = nx.GaussianModel(arrays[f"{m}/raw/mean"], arrays[f"{m}/raw/cov"], s["raw_count"])
        st = ModalityState(m, tensor(f"{m}/prompt_P"), tensor(f"{m}/prompt_Q"), tensor(f"{m}/head_delta"), raw)
        st.registry = [(int(c), tuple(tok)) for c, tok in s["registry"]]
        st.class_stats = {
            int(c): nx.GaussianModel(arrays[f"{m}/class{c}/mean"], arrays[f"{m}/class{c}/cov"], n)
            for c, n in s["class_counts"].items()
        }
        st.tasks_completed = s["tasks_completed"]
        model.states[m] = st
        model._token_table.update(dict(st.registry))
    if meta.get("gate"):
        gate = RelevanceGate(meta["gate"]["modalities"], backbone.cfg.d_model, model.dtype)
        gate.weight = nx.Parameter(tensor("gate/weight"))
        gate.bias = nx.Parameter(tensor("gate/bias"))
        model.gate = gate
    return model
