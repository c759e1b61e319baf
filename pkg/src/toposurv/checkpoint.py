"""Flat named-array container for parameter checkpoints and fitted models.

Binary layout: magic 'TGC1', u32 entry count, then per entry a u16
name length + utf8 name, u8 dtype tag (0 = f32, 1 = f64), u8 rank,
rank x u32 extents, and the little-endian payload.  Model checkpoints
store f64 so a resumed run is bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor

_MAGIC = b"TGC1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [_MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            arr = arr.astype(np.float64)
        tag = _TAGS[arr.dtype]
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(_DTYPES[tag], copy=False).tobytes(order="C"))
    return b"".join(chunks)


def unpack_arrays(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != _MAGIC:
        raise CheckpointError("not a TGC1 container")
    count = struct.unpack("<I", data[4:8])[0]
    pos = 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", data[pos:pos + 2])
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        tag, rank = struct.unpack("<BB", data[pos:pos + 2])
        pos += 2
        shape = struct.unpack(f"<{rank}I", data[pos:pos + 4 * rank])
        pos += 4 * rank
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(shape)) * dtype.itemsize
        arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)),
                            offset=pos).reshape(shape)
        pos += nbytes
        out[name] = arr.astype(np.float64) if tag == 1 else arr.copy()
    return out


def save_arrays(path, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(pack_arrays(arrays))


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return unpack_arrays(fh.read())


def params_to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: t.values for name, t in params.items()}


def arrays_to_params(arrays: dict[str, np.ndarray],
                     prefix: str = "") -> dict[str, Tensor]:
    return {name[len(prefix):]: Tensor(arr.copy(), requires_grad=True)
            for name, arr in arrays.items() if name.startswith(prefix)}
