"""Binary checkpoint format for trained networks.

Layout (little-endian)::

    b"VAE1" | u32 version | u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 rank | rank x u32 extents | f64 data

The architecture travels inside the file as a rank-1 tensor named
``__arch__`` whose entries are the UTF-8 bytes of a JSON description, so a
checkpoint is self-contained.  Optional ``__epoch__`` and ``adam.*``
tensors carry the optimizer state for resumed training.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import VaeNetwork
from .train import AdamState

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "load_training_state"]

MAGIC = b"VAE1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw_name = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def save_checkpoint(net: VaeNetwork, path, *, epoch: int | None = None,
                    adam: AdamState | None = None) -> None:
    arch = json.dumps(net.architecture(), sort_keys=True).encode("utf-8")
    tensors = [("__arch__", np.frombuffer(arch, dtype=np.uint8).astype(np.float64))]
    tensors += [(k, net.params[k]) for k in sorted(net.params)]
    if epoch is not None:
        tensors.append(("__epoch__", np.array(float(epoch))))
    if adam is not None:
        tensors.append(("adam.step", np.array(float(adam.step))))
        tensors += [(f"adam.m.{k}", adam.m[k]) for k in sorted(adam.m)]
        tensors += [(f"adam.v.{k}", adam.v[k]) for k in sorted(adam.v)]
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors:
            fh.write(_pack_tensor(name, arr))


def _read_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted checkpoint ({exc})") from exc
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    if "__arch__" not in out:
        raise CheckpointError(f"{path}: missing architecture record")
    return out


def load_checkpoint(path) -> VaeNetwork:
    tensors = _read_tensors(path)
    arch = json.loads(tensors["__arch__"].astype(np.uint8).tobytes().decode("utf-8"))
    params = {k: v for k, v in tensors.items() if not k.startswith(("__", "adam."))}
    try:
        return VaeNetwork.from_architecture(arch, params=params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def load_training_state(path) -> tuple[VaeNetwork, int, AdamState | None]:
    """Network, completed epoch count and optimizer state for resuming."""
    tensors = _read_tensors(path)
    net = load_checkpoint(path)
    epoch = int(tensors["__epoch__"]) if "__epoch__" in tensors else 0
    adam = None
    if "adam.step" in tensors:
        adam = AdamState(step=int(tensors["adam.step"]))
        for k, v in tensors.items():
            if k.startswith("adam.m."):
                adam.m[k[len("adam.m."):]] = v
            elif k.startswith("adam.v."):
                adam.v[k[len("adam.v."):]] = v
    return net, epoch, adam
