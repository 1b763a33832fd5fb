"""Checkpoints: a JSON manifest next to a raw little-endian float64 blob.

``<stem>.json`` lists every tensor with its shape and element offset into
``<stem>.bin``, plus the config hash, variant, epoch and optimizer state.
Optimizer moments are stored in the blob like any other tensor.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import metalearn as ML
from . import recognizer as R
from .recognizer import ModelConfig

FORMAT = "writeradapt-checkpoint/1"
DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def config_hash(cfg: ModelConfig) -> str:
    text = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_tensors(path, tensors: dict[str, np.ndarray], info: dict) -> Path:
    """Write ``tensors`` (in sorted key order) and ``info`` into a manifest + blob pair."""
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    manifest = {"format": FORMAT, "tensors": entries, "n_elements": offset, **info}
    tmp = blob_path.with_suffix(".bin.tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, blob_path)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path, blob_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
        blob = np.frombuffer(blob_path.read_bytes(), dtype=DTYPE)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest {manifest_path}: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    if blob.size != manifest["n_elements"]:
        raise CheckpointError(f"blob has {blob.size} elements, manifest expects {manifest['n_elements']}")
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        tensors[e["name"]] = blob[e["offset"] : e["offset"] + n].reshape(e["shape"]).copy()
    return tensors, manifest


def _check_hash(manifest: dict, cfg: ModelConfig, path) -> None:
    expected = config_hash(cfg)
    if manifest.get("config_hash") != expected:
        raise CheckpointError(
            f"{path}: config hash {manifest.get('config_hash')} does not match the model config ({expected})"
        )


def save_params(path, params: R.ParamSet, cfg: ModelConfig, epoch: int = 0) -> Path:
    return save_tensors(path, R.flatten(params, "theta/"),
                        {"kind": "params", "config_hash": config_hash(cfg), "epoch": epoch})


def load_params(path, cfg: ModelConfig) -> tuple[R.ParamSet, dict]:
    """Recognizer weights from a params or meta checkpoint."""
    tensors, manifest = load_tensors(path)
    _check_hash(manifest, cfg, path)
    like = R.init_params(cfg, 0)
    try:
        params = R.unflatten(tensors, like, "theta/")
        R.check_params(params, cfg)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: incompatible parameters ({exc})") from None
    return params, manifest


def save_meta(path, meta: ML.MetaParams, cfg: ModelConfig) -> Path:
    tensors = dict(meta.flat())
    opt = meta.opt
    for k, v in opt.m.items():
        tensors[f"opt_m/{k}"] = v
    for k, v in opt.v.items():
        tensors[f"opt_v/{k}"] = v
    info = {
        "kind": "meta",
        "config_hash": config_hash(cfg),
        "variant": meta.variant.value,
        "epoch": meta.epoch,
        "weighted": meta.weighted,
        "learn_alpha": meta.learn_alpha,
        "optimizer": {"name": "adam", "lr": opt.lr, "b1": opt.b1, "b2": opt.b2, "eps": opt.eps, "t": opt.t},
    }
    return save_tensors(path, tensors, info)


def load_meta(path, cfg: ModelConfig) -> ML.MetaParams:
    tensors, manifest = load_tensors(path)
    _check_hash(manifest, cfg, path)
    if manifest.get("kind") != "meta":
        raise CheckpointError(f"{path} holds plain parameters, not a meta-trained model")
    o = manifest["optimizer"]
    opt = R.Adam(o["lr"], o["b1"], o["b2"], o["eps"])
    opt.t = o["t"]
    opt.m = {k[6:]: v for k, v in tensors.items() if k.startswith("opt_m/")}
    opt.v = {k[6:]: v for k, v in tensors.items() if k.startswith("opt_v/")}
    theta = R.unflatten(tensors, R.init_params(cfg, 0), "theta/")
    gamma = {k[6:]: v for k, v in tensors.items() if k.startswith("gamma/")} or None
    if gamma is not None:  # W1, b1, W2, b2, ... as built by init_weight_net
        gamma = dict(sorted(gamma.items(), key=lambda kv: (int(kv[0][1:]), kv[0][0] != "W")))
    alpha: dict = {}
    for k, v in tensors.items():
        if k.startswith("alpha/"):
            parts = k.split("/")
            if len(parts) == 2:
                alpha[parts[1]] = v
            else:
                alpha.setdefault(parts[1], {})[parts[2]] = v
    # keep the layer order of the model so graph construction is stable
    alpha = {l: ({n: alpha[l][n] for n in theta[l]} if isinstance(alpha[l], dict) else alpha[l])
             for l in theta if l in alpha}
    return ML.MetaParams(theta, ML.Variant(manifest["variant"]), alpha, gamma, manifest["weighted"],
                         manifest["learn_alpha"], opt, manifest["epoch"])
