"""Single-file binary checkpoints.

Layout (all integers little-endian)::

    b"DGCK" | u32 header_len | header JSON (version, epoch, config, n_tensors)
    then per tensor: u16 name_len | name | u8 dtype tag | u8 ndim | u32 dims... | payload

Tensors are model parameters (``model.*``), RMSProp state (``optim.<param>.*``)
and the torch RNG state (``rng.torch``).
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .training import TrainConfig, build_model, make_optimizer

MAGIC = b"DGCK"
FORMAT_VERSION = 1

_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint8}
_TAGS = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _named_tensors(model, optimizer) -> list[tuple[str, torch.Tensor]]:
    out = [(f"model.{k}", v) for k, v in model.state_dict().items()]
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                for key, val in sorted(optimizer.state.get(p, {}).items()):
                    out.append((f"optim.{names[id(p)]}.{key}", torch.as_tensor(val)))
    out.append(("rng.torch", torch.get_rng_state()))
    return out


def encode_checkpoint(model, config: TrainConfig, optimizer=None, epoch: int = 0) -> bytes:
    tensors = _named_tensors(model, optimizer)
    header = json.dumps({"version": FORMAT_VERSION, "epoch": epoch, "config": config.to_dict(),
                         "n_tensors": len(tensors)}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    for name, t in tensors:
        arr = t.detach().cpu().numpy()
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def save_checkpoint(path, model, config: TrainConfig, optimizer=None, epoch: int = 0) -> None:
    with open(path, "wb") as f:
        f.write(encode_checkpoint(model, config, optimizer, epoch))


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen])
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    pos = 8 + hlen
    tensors = {}
    for _ in range(header["n_tensors"]):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        name = blob[pos + 2:pos + 2 + nlen].decode()
        pos += 2 + nlen
        tag, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dt = np.dtype(_DTYPES[tag]).newbyteorder("<")
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dt, count, pos).reshape(shape).astype(_DTYPES[tag])
        pos += count * dt.itemsize
    return header, tensors


def load_checkpoint(path):
    """Returns ``(model, config, optimizer, epoch)``; restores the torch RNG state."""
    with open(path, "rb") as f:
        header, tensors = decode_checkpoint(f.read())
    config = TrainConfig.from_dict(header["config"])
    model = build_model(config)
    state = model.state_dict()
    loaded = {}
    for k, ref in state.items():
        arr = tensors.get(f"model.{k}")
        if arr is None:
            raise CheckpointError(f"checkpoint is missing tensor {k}")
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for {k}: {arr.shape} vs {tuple(ref.shape)}")
        loaded[k] = torch.from_numpy(arr.copy())
    model.load_state_dict(loaded)
    optimizer = make_optimizer(model, config)
    for n, p in model.named_parameters():
        st = {key.rsplit(".", 1)[1]: torch.from_numpy(v.copy())
              for key, v in tensors.items() if key.startswith(f"optim.{n}.")
              and key.count(".") == n.count(".") + 2}
        if st:
            optimizer.state[p] = st
    if "rng.torch" in tensors:
        torch.set_rng_state(torch.from_numpy(tensors["rng.torch"].copy()))
    return model, config, optimizer, header["epoch"]
