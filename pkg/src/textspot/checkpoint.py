"""Versioned checkpoint container with per-segment integrity hashes.

Layout: magic, 8-byte header length, JSON header (sorted keys), raw parameter
bytes. Serialization is fully deterministic, so load-then-save is byte-stable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch

MAGIC = b"TXTSPOT1"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    iteration: int
    state: dict[str, dict[str, np.ndarray]]  # segment -> param -> array
    numpy_rng_state: dict | None = None
    torch_rng_state: bytes | None = None


def _model_state(model) -> dict[str, dict[str, np.ndarray]]:
    out = {}
    for seg_name, module in model.segments.items():
        out[seg_name] = {
            k: v.detach().cpu().numpy() for k, v in module.state_dict().items()
        }
    return out


def save(path: str, model, iteration: int = 0, numpy_rng=None) -> None:
    state = _model_state(model)
    ckpt = Checkpoint(
        config_text=model.config.to_text(),
        iteration=iteration,
        state=state,
        numpy_rng_state=numpy_rng.bit_generator.state if numpy_rng is not None else None,
        torch_rng_state=bytes(torch.get_rng_state().numpy().tobytes()),
    )
    write(path, ckpt)


def write(path: str, ckpt: Checkpoint) -> None:
    blobs = []
    offset = 0
    segments = {}
    for seg in sorted(ckpt.state):
        params = []
        seg_hash = hashlib.sha256()
        for key in sorted(ckpt.state[seg]):
            arr = np.ascontiguousarray(ckpt.state[seg][key])
            raw = arr.tobytes()
            seg_hash.update(raw)
            params.append(
                {
                    "key": key,
                    "dtype": arr.dtype.str,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(raw),
                }
            )
            blobs.append(raw)
            offset += len(raw)
        segments[seg] = {"params": params, "sha256": seg_hash.hexdigest()}
    header = {
        "config": ckpt.config_text,
        "iteration": ckpt.iteration,
        "numpy_rng": ckpt.numpy_rng_state,
        "torch_rng": ckpt.torch_rng_state.hex() if ckpt.torch_rng_state else None,
        "segments": segments,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(hbytes).to_bytes(8, "big"))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)


def read(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic in {path}")
        hlen = int.from_bytes(f.read(8), "big")
        header = json.loads(f.read(hlen))
        data = f.read()
    state: dict[str, dict[str, np.ndarray]] = {}
    for seg, info in header["segments"].items():
        state[seg] = {}
        seg_hash = hashlib.sha256()
        for p in info["params"]:
            raw = data[p["offset"] : p["offset"] + p["nbytes"]]
            seg_hash.update(raw)
            state[seg][p["key"]] = np.frombuffer(raw, dtype=np.dtype(p["dtype"])).reshape(
                p["shape"]
            ).copy()
        if seg_hash.hexdigest() != info["sha256"]:
            raise CheckpointError(f"segment {seg!r} hash mismatch in {path}")
    return Checkpoint(
        config_text=header["config"],
        iteration=header["iteration"],
        state=state,
        numpy_rng_state=header.get("numpy_rng"),
        torch_rng_state=bytes.fromhex(header["torch_rng"]) if header.get("torch_rng") else None,
    )


def load_model(path: str):
    """Rebuild a TextSpotter from a checkpoint file."""
    from .config import Config
    from .model import TextSpotter

    ckpt = read(path)
    config = Config.from_text(ckpt.config_text)
    model = TextSpotter(config)
    for seg_name, module in model.segments.items():
        sd = {k: torch.from_numpy(v) for k, v in ckpt.state[seg_name].items()}
        module.load_state_dict(sd)
    return model, ckpt
