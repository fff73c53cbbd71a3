"""Checkpoint files: 8-byte magic, u64 header length, JSON header, raw blob.

The header lists every tensor's name, shape, dtype, byte offset and length;
the blob holds the little-endian values back to back in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import AdamState, Tensor

MAGIC = b"CPLCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    format_version: int
    step: int
    config: dict
    rng: dict
    adam: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param/") :]: v for k, v in self.tensors.items() if k.startswith("param/")}


def _le(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr).astype(arr.dtype.newbyteorder("<"), order="C", copy=False)


def encode(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = _le(ckpt.tensors[name])
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": ckpt.format_version,
        "step": ckpt.step,
        "config": ckpt.config,
        "rng": ckpt.rng,
        "adam": ckpt.adam,
        "tensors": entries,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(chunks)


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if 16 + hlen > len(buf):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    if not isinstance(header, dict):
        raise CheckpointError("corrupt header: not a JSON object")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r} (expected {FORMAT_VERSION})")
    try:
        blob = memoryview(buf)[16 + hlen :]
        tensors = {}
        for e in header["tensors"]:
            dt = np.dtype(e["dtype"])
            shape = tuple(int(s) for s in e["shape"])
            start, nbytes = int(e["offset"]), int(e["nbytes"])
            if nbytes != int(np.prod(shape)) * dt.itemsize:
                raise CheckpointError(f"tensor {e['name']!r}: {nbytes} bytes do not match shape {shape} of {dt}")
            if start + nbytes > len(blob):
                raise CheckpointError(f"truncated blob at tensor {e['name']!r}")
            tensors[e["name"]] = np.frombuffer(blob[start : start + nbytes], dtype=dt).reshape(shape).copy()
        return Checkpoint(version, int(header["step"]), header["config"], header["rng"], header["adam"], tensors)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt header: {exc}") from None


def checkpoint_of(state) -> Checkpoint:
    tensors = {f"param/{k}": p.data for k, p in state.params().items()}
    for k, v in state.adam.m.items():
        tensors[f"adam.m/{k}"] = v
    for k, v in state.adam.v.items():
        tensors[f"adam.v/{k}"] = v
    a = state.adam
    adam = {"step": a.step, "lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps}
    # every random stream is a pure function of (seed, step, sample), so this is the whole RNG state
    rng = {"scheme": "seedsequence-spawn", "seed": state.config.seed, "step": state.step}
    return Checkpoint(FORMAT_VERSION, state.step, state.config.to_json(), rng, adam, tensors)


def save_checkpoint(state_or_ckpt, path) -> Path:
    ckpt = state_or_ckpt if isinstance(state_or_ckpt, Checkpoint) else checkpoint_of(state_or_ckpt)
    path = Path(path)
    path.write_bytes(encode(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def state_from_checkpoint(ckpt: Checkpoint, config=None):
    """Rebuild a TrainState; ``config`` (if given) may extend ``steps`` and
    logging cadence but must agree on everything that shapes the model."""
    from .trainer import TrainConfig, init_state

    saved = TrainConfig.from_json(ckpt.config)
    if config is not None:
        a, b = dict(saved.to_json()), dict(config.to_json())
        for key in ("steps", "checkpoint_every", "log_every"):
            a.pop(key)
            b.pop(key)
        if a != b:
            diff = sorted(k for k in a if a[k] != b.get(k))
            raise CheckpointError(f"checkpoint config disagrees with the requested config on {diff}")
        saved = config
    state = init_state(saved)
    params = state.params()
    stored = ckpt.params()
    if set(stored) != set(params):
        raise CheckpointError(f"parameter names differ: missing {sorted(set(params) - set(stored))}, extra {sorted(set(stored) - set(params))}")
    for name, p in params.items():
        arr = stored[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"shape disagreement for {name!r}: checkpoint {arr.shape}, model {p.shape}")
        p.data = arr.astype(p.dtype, copy=False)
    a = ckpt.adam
    state.adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=int(a["step"]))
    for name in params:
        if f"adam.m/{name}" in ckpt.tensors:
            state.adam.m[name] = ckpt.tensors[f"adam.m/{name}"]
            state.adam.v[name] = ckpt.tensors[f"adam.v/{name}"]
    state.step = ckpt.step
    return state


def tensors_equal(a: dict[str, Tensor], b: dict[str, Tensor]) -> bool:
    return a.keys() == b.keys() and all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
