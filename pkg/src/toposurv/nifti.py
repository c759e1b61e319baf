"""Single-file NIfTI-1 reading/writing, a plain binary fallback container,
and cohort manifest ingestion.

Only the fields the pipeline needs are interpreted; orientation matrices
are read past and ignored since volumes are processed in stored index
order.  Parsing is total: malformed bytes raise typed errors, never
crash.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass

import numpy as np


class NiftiError(ValueError):
    pass


class BadMagic(NiftiError):
    pass


class BadHeader(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedData(NiftiError):
    pass


class ManifestError(ValueError):
    pass


class DuplicatePatient(ManifestError):
    pass


class NonPositiveTime(ManifestError):
    pass


class BadEventFlag(ManifestError):
    pass


# NIfTI-1 datatype codes supported by this reader
_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}

_HEADER_SIZE = 348
_MIN_VOX_OFFSET = 352


@dataclass
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple[int, ...]  # dim[0] is the rank
    datatype_code: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes

    @property
    def rank(self) -> int:
        return self.dim[0]

    @property
    def extents(self) -> tuple[int, ...]:
        return self.dim[1:1 + self.rank]


def _detect_order(data: bytes) -> str:
    for order in ("<", ">"):
        if struct.unpack(order + "i", data[:4])[0] == _HEADER_SIZE:
            return order
    raise BadHeader("sizeof_hdr is not 348 in either byte order")


def parse_nifti(data: bytes) -> tuple[NiftiHeader, np.ndarray]:
    """Parse single-file NIfTI-1 bytes into (header, volume).

    The volume is returned in stored index order with shape dim[1..rank].
    Intensity scaling raw*scl_slope + scl_inter is applied when
    scl_slope is nonzero and not the identity.
    """
    data = bytes(data)
    if len(data) < _MIN_VOX_OFFSET:
        raise TruncatedData(f"{len(data)} bytes, need at least {_MIN_VOX_OFFSET}")
    order = _detect_order(data)
    dim = struct.unpack(order + "8h", data[40:56])
    datatype_code, bitpix = struct.unpack(order + "2h", data[70:74])
    pixdim = struct.unpack(order + "8f", data[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(order + "3f", data[108:120])
    magic = data[344:348]

    if magic != b"n+1\x00":
        raise BadMagic(f"magic {magic!r}; only single-file 'n+1' accepted")
    rank = dim[0]
    if not 1 <= rank <= 7:
        raise BadHeader(f"dim[0] = {rank} outside [1, 7]")
    extents = dim[1:1 + rank]
    if any(e < 1 for e in extents):
        raise BadHeader(f"nonpositive extent in {extents}")
    if vox_offset < _MIN_VOX_OFFSET:
        raise BadHeader(f"vox_offset {vox_offset} < {_MIN_VOX_OFFSET}")
    if datatype_code not in _DTYPES:
        raise UnsupportedDatatype(f"datatype code {datatype_code}")

    dtype = _DTYPES[datatype_code].newbyteorder(order)
    count = int(np.prod(extents))
    start = int(vox_offset)
    needed = count * dtype.itemsize
    if len(data) < start + needed:
        raise TruncatedData(
            f"payload needs {needed} bytes at offset {start}, have {len(data) - start}")
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=start)
    # NIfTI stores the first axis fastest
    volume = raw.reshape(extents, order="F")
    if volume.dtype.byteorder not in ("=", "|") and order == ">":
        volume = volume.astype(volume.dtype.newbyteorder("="))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        volume = volume.astype(np.float64) * scl_slope + scl_inter

    header = NiftiHeader(_HEADER_SIZE, dim, datatype_code, bitpix, pixdim,
                         vox_offset, scl_slope, scl_inter, magic)
    return header, volume


def write_nifti(volume: np.ndarray, pixdim=None, datatype: int = 16) -> bytes:
    """Serialize a volume as little-endian single-file NIfTI-1 bytes.

    Emits f32 data by default (u8 via datatype=2 for masks), scl_slope=1,
    scl_inter=0, vox_offset=352.
    """
    volume = np.asarray(volume)
    if volume.ndim > 7:
        raise BadHeader(f"rank {volume.ndim} exceeds the NIfTI dim[0] cap of 7")
    if volume.ndim < 1:
        raise BadHeader("volume must have at least one axis")
    if datatype not in (2, 16):
        raise UnsupportedDatatype(f"writer supports f32 (16) and u8 (2), not {datatype}")
    dtype = _DTYPES[datatype].newbyteorder("<")
    payload = np.asfortranarray(volume.astype(dtype, copy=False)).tobytes(order="F")

    dim = [volume.ndim] + list(volume.shape) + [1] * (7 - volume.ndim)
    if pixdim is None:
        pixdim = [1.0] * volume.ndim
    pd = [0.0] + list(pixdim) + [1.0] * (7 - len(pixdim))

    header = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", header, 0, _HEADER_SIZE)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<2h", header, 70, datatype, dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, *pd[:8])
    struct.pack_into("<3f", header, 108, float(_MIN_VOX_OFFSET), 1.0, 0.0)
    header[344:348] = b"n+1\x00"
    # 4 zero bytes: no header extensions
    return bytes(header) + b"\x00\x00\x00\x00" + payload


# ---------------------------------------------------------------------------
# Fallback container: 16-byte fixed prefix, then extents, then f32 payload
# ---------------------------------------------------------------------------

_FALLBACK_MAGIC = b"TGV1"


def write_fallback(volume: np.ndarray) -> bytes:
    volume = np.asarray(volume, dtype=np.float32)
    head = _FALLBACK_MAGIC + struct.pack("<I", volume.ndim) + b"\x00" * 8
    extents = struct.pack(f"<{volume.ndim}I", *volume.shape)
    return head + extents + volume.astype("<f4").tobytes(order="C")


def parse_fallback(data: bytes) -> np.ndarray:
    data = bytes(data)
    if len(data) < 16 or data[:4] != _FALLBACK_MAGIC:
        raise BadMagic("not a TGV1 container")
    rank = struct.unpack("<I", data[4:8])[0]
    if len(data) < 16 + 4 * rank:
        raise TruncatedData("extent table truncated")
    extents = struct.unpack(f"<{rank}I", data[16:16 + 4 * rank])
    count = int(np.prod(extents))
    start = 16 + 4 * rank
    if len(data) < start + 4 * count:
        raise TruncatedData("payload truncated")
    raw = np.frombuffer(data, dtype="<f4", count=count, offset=start)
    return raw.reshape(extents)


def load_volume(path) -> np.ndarray:
    """Read a volume from .nii or the fallback container by sniffing magic."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == _FALLBACK_MAGIC:
        return parse_fallback(data)
    return parse_nifti(data)[1]


# ---------------------------------------------------------------------------
# Cohort manifest
# ---------------------------------------------------------------------------

MANIFEST_COLUMNS = ("patient_id", "t1", "t1ce", "t2", "flair", "mask",
                    "time_days", "event", "age")


@dataclass
class ManifestRow:
    patient_id: str
    t1: str
    t1ce: str
    t2: str
    flair: str
    mask: str | None
    time_days: float
    event: int
    age: float

    def modality_paths(self) -> tuple[str, str, str, str]:
        return (self.t1, self.t1ce, self.t2, self.flair)


@dataclass
class CohortManifest:
    rows: list[ManifestRow]

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)


def read_manifest(text: str) -> CohortManifest:
    """Parse manifest CSV text; validates ids, times and event flags."""
    reader = csv.DictReader(io.StringIO(text))
    missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        raise ManifestError(f"manifest missing columns: {sorted(missing)}")
    rows = []
    seen = set()
    for rec in reader:
        pid = rec["patient_id"].strip()
        if pid in seen:
            raise DuplicatePatient(pid)
        seen.add(pid)
        time_days = float(rec["time_days"])
        if time_days <= 0:
            raise NonPositiveTime(f"{pid}: time_days = {time_days}")
        event_text = rec["event"].strip()
        if event_text not in ("0", "1"):
            raise BadEventFlag(f"{pid}: event = {event_text!r}")
        mask = rec["mask"].strip() or None
        rows.append(ManifestRow(pid, rec["t1"].strip(), rec["t1ce"].strip(),
                                rec["t2"].strip(), rec["flair"].strip(), mask,
                                time_days, int(event_text), float(rec["age"])))
    return CohortManifest(rows)


def write_manifest(rows: list[ManifestRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in rows:
        writer.writerow([r.patient_id, r.t1, r.t1ce, r.t2, r.flair,
                         r.mask or "", repr(r.time_days), r.event, repr(r.age)])
    return out.getvalue()
