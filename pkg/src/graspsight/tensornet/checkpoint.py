"""Binary checkpoint files.

Layout (little-endian): ``b"GSPT"``, u32 version, u32 tensor count, then per
tensor a u16 name length, the UTF-8 name, u8 ndim, ndim x u32 dims and the
row-major f32 payload.

Architecture metadata rides along as ordinary tensors whose names start with
``meta.``: ``meta.arch.<identifier>`` (a single zero) and ``meta.hp.<key>``
(the hyperparameter values).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .network import Network

MAGIC = b"GSPT"
VERSION = 1
META_PREFIX = "meta."


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


PathLike = Union[str, Path]


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {buf[:4]!r}")
    if len(buf) < 12:
        raise TruncatedCheckpointError("checkpoint header is truncated")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    pos = 12
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedCheckpointError(f"checkpoint ends at byte {len(buf)}, needed {pos + n}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
    return out


def network_tensors(network: Network) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    if network.params:
        tensors[f"{META_PREFIX}arch.{network.arch}"] = np.zeros(1, dtype=np.float32)
        for key, value in network.hparams.items():
            tensors[f"{META_PREFIX}hp.{key}"] = np.atleast_1d(np.asarray(value, dtype=np.float32))
    for name, p in network.params.items():
        tensors[name] = p.data
    return tensors


def save_checkpoint(network: Network, path: PathLike) -> int:
    data = encode_tensors(network_tensors(network))
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path: PathLike) -> dict[str, np.ndarray]:
    """Every tensor in the file, metadata included, in file order."""
    return decode_tensors(Path(path).read_bytes())


def checkpoint_arch(tensors: dict[str, np.ndarray]) -> tuple[str, dict[str, np.ndarray]]:
    arch = ""
    hparams: dict[str, np.ndarray] = {}
    for name, value in tensors.items():
        if name.startswith(META_PREFIX + "arch."):
            arch = name[len(META_PREFIX + "arch."):]
        elif name.startswith(META_PREFIX + "hp."):
            hparams[name[len(META_PREFIX + "hp."):]] = value
    return arch, hparams


def load_into(network: Network, tensors: dict[str, np.ndarray]) -> Network:
    """Copy checkpoint tensors into ``network``, checking names and shapes."""
    for name, p in network.params.items():
        if name not in tensors:
            raise ShapeMismatchError(f"checkpoint has no tensor {name!r}")
        if tensors[name].shape != p.shape:
            raise ShapeMismatchError(
                f"tensor {name!r}: checkpoint shape {tensors[name].shape} != network shape {p.shape}")
    extra = [n for n in tensors if not n.startswith(META_PREFIX) and n not in network.params]
    if extra:
        raise ShapeMismatchError(f"checkpoint tensors not in network: {extra}")
    for name, p in network.params.items():
        p.data = tensors[name].astype(network.dtype)
    return network
