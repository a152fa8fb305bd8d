"""Checkpoint container.

Layout::

    b"PAMCKPT1"
    uint64 little-endian header length
    UTF-8 JSON header: config, step, rng, extra, manifest [{name, shape, offset, nbytes}]
    raw little-endian float32 buffers, in manifest order (offsets relative to this point)

Optimizer moments are stored as ordinary entries named ``optim/<param>/<slot>``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .exceptions import CheckpointError
from .model import ModelConfig, PhaseLM

MAGIC = b"PAMCKPT1"
FORMAT_VERSION = 1


def _as_le_f32(t):
    return np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4", copy=False))


def write_checkpoint(path, tensors, header):
    """Low-level writer: ``tensors`` is an ordered name -> tensor mapping."""
    manifest, blobs, offset = [], [], 0
    for name, t in tensors.items():
        buf = _as_le_f32(t).tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    header = dict(header, format_version=FORMAT_VERSION, dtype="float32-le", manifest=manifest)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for buf in blobs:
            fh.write(buf)
    tmp.replace(path)


def read_checkpoint(path):
    """Low-level reader: returns ``(header, {name: float32 tensor})``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    base = start + n
    tensors = {}
    for entry in header["manifest"]:
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise CheckpointError(f"{path}: truncated buffer for {entry['name']}")
        arr = np.frombuffer(raw[lo:hi], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    return header, tensors


def save(path, model, step=0, optimizer=None, rng=None, extra=None):
    tensors = dict(model.state_dict())
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        state = optimizer.state_dict()["state"]
        for i, name in enumerate(names):
            for slot in ("exp_avg", "exp_avg_sq"):
                if i in state and slot in state[i]:
                    tensors[f"optim/{name}/{slot}"] = state[i][slot]
    header = {
        "config": model.cfg.to_dict(),
        "step": int(step),
        "optimizer_step": int(step) if optimizer is not None else None,
        "rng": rng or {},
        "extra": extra or {},
    }
    write_checkpoint(path, tensors, header)


def load(path, optimizer_factory=None):
    """Rebuild ``(model, header, optimizer)``; optimizer is ``None`` without a factory."""
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    with torch.device("cpu"):
        prev = torch.get_default_dtype()
        torch.set_default_dtype(torch.float32)
        try:
            model = PhaseLM(cfg)
        finally:
            torch.set_default_dtype(prev)
    params = {k: v for k, v in tensors.items() if not k.startswith("optim/")}
    model.load_state_dict(params)
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model)
        step = header.get("optimizer_step")
        if step:
            sd = optimizer.state_dict()
            for i, (name, _) in enumerate(model.named_parameters()):
                if f"optim/{name}/exp_avg" in tensors:
                    sd["state"][i] = {
                        "step": torch.tensor(float(step)),
                        "exp_avg": tensors[f"optim/{name}/exp_avg"].clone(),
                        "exp_avg_sq": tensors[f"optim/{name}/exp_avg_sq"].clone(),
                    }
            optimizer.load_state_dict(sd)
    return model, header, optimizer
