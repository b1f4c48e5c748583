"""Binary checkpoint format shared by the denoiser and the classifier.

Layout: magic ``CEBM``, u32 version, 32-byte architecture hash, u32
metadata-JSON length + bytes, u32 tensor count, then per tensor a u16
name length, utf-8 name, u8 rank, u32 dims, and a little-endian float32
payload. All integers little-endian.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ContractError

MAGIC = b"CEBM"
VERSION = 1


def arch_hash(arch: dict) -> bytes:
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).digest()


def params_hash(arch: dict, params: dict) -> str:
    """Content hash over architecture and all parameter payloads."""
    h = hashlib.sha256(arch_hash(arch))
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(path, arch: dict, params: dict, metadata: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps(metadata, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(arch_hash(arch))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f4")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path):
    """Return (arch_hash_bytes, metadata, params) from a checkpoint file."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: bad magic")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise ContractError(f"{path}: unsupported version {version}")
    ahash = raw[off : off + 32]
    off += 32
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    metadata = json.loads(raw[off : off + mlen])
    off += mlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims).copy()
        off += 4 * n
        params[name] = Tensor(arr)
    return ahash, metadata, params
