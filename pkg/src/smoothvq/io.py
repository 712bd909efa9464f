"""Binary file formats: tensors, codebooks (with optional smoothing factors) and cache snapshots.

All multi-byte integers and floats are little-endian.

Tensor (``VITN``)::

    magic[4] version:u32 dtype:u8 (0=f32, 1=f16) ndims:u8 dims:u64*ndims payload

Codebook (``VICB``)::

    magic[4] version:u32 D:u32 d:u32 b:u8 has_smoothing:u8
    lambda:f32*D (if has_smoothing) centroids:f32*(2^b*d)
    provenance_len:u32 provenance:utf8

A smoothing-only file (written by ``calibrate``) has ``b = 0`` and ``d = 0``
and no centroid payload.

Cache snapshot (``VIKV``)::

    magic[4] version:u32 D:u32 key_d:u32 key_b:u8 value_d:u32 value_b:u8
    residual_len:u32 n_quantized:u64 n_residual:u64 total_len:u64
    key_codes value_codes          (bit-packed rows, see vq.pack_codes)
    key_residual value_residual    (f32, n_residual x D each)
    crc32:u32                      (over every preceding byte)
"""
from __future__ import annotations

import io
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, FormatError
from .kvcache import CacheConfig, QuantizedKVCache
from .transform import SmoothingFactors
from .vq import Codebook, VQConfig, pack_codes, unpack_codes

VERSION = 1
TENSOR_MAGIC = b"VITN"
CODEBOOK_MAGIC = b"VICB"
SNAPSHOT_MAGIC = b"VIKV"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def _unpack(f, fmt: str):
    fmt = "<" + fmt
    return struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt)))


def _check_header(f, magic: bytes) -> None:
    got = _read_exact(f, 4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = _unpack(f, "I")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# --- tensors ----------------------------------------------------------------


def tensor_bytes(x, dtype: str = "f32") -> bytes:
    code = {"f32": 0, "f16": 1}[dtype]
    arr = np.ascontiguousarray(np.asarray(x), dtype=_DTYPES[code])
    out = io.BytesIO()
    out.write(TENSOR_MAGIC)
    out.write(struct.pack("<IBB", VERSION, code, arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    out.write(arr.tobytes())
    return out.getvalue()


def write_tensor(path, x, dtype: str = "f32") -> None:
    _atomic_write(path, tensor_bytes(x, dtype))


def read_tensor_from(f) -> np.ndarray:
    _check_header(f, TENSOR_MAGIC)
    code, ndims = _unpack(f, "BB")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = _unpack(f, f"{ndims}Q")
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndims else 1
    payload = _read_exact(f, count * dt.itemsize)
    if f.read(1):
        raise FormatError("trailing bytes after tensor payload")
    # f16 payloads are widened on load
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(np.float32)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor_from(f)


# --- codebooks --------------------------------------------------------------


@dataclass(frozen=True)
class CodebookFile:
    head_dim: int
    smoothing: SmoothingFactors | None
    codebook: Codebook | None


def codebook_bytes(head_dim: int, codebook: Codebook | None, smoothing: SmoothingFactors | None) -> bytes:
    out = io.BytesIO()
    out.write(CODEBOOK_MAGIC)
    d, b = (codebook.config.d, codebook.config.b) if codebook is not None else (0, 0)
    out.write(struct.pack("<IIIBB", VERSION, head_dim, d, b, smoothing is not None))
    if smoothing is not None:
        out.write(np.ascontiguousarray(smoothing.lam, dtype="<f4").tobytes())
    if codebook is not None:
        out.write(np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes())
    prov = (codebook.provenance if codebook is not None else "").encode("utf-8")
    out.write(struct.pack("<I", len(prov)))
    out.write(prov)
    return out.getvalue()


def write_codebook(path, head_dim: int, codebook: Codebook | None = None, smoothing: SmoothingFactors | None = None, provenance: str | None = None) -> None:
    if codebook is not None and provenance is not None:
        codebook = Codebook(codebook.config, codebook.centroids, provenance, codebook.history)
    _atomic_write(path, codebook_bytes(head_dim, codebook, smoothing))


def read_codebook(path) -> CodebookFile:
    with open(path, "rb") as f:
        _check_header(f, CODEBOOK_MAGIC)
        head_dim, d, b, has_smoothing = _unpack(f, "IIBB")
        if has_smoothing not in (0, 1):
            raise FormatError("has_smoothing flag must be 0 or 1")
        if b > 16 or (b == 0) != (d == 0) or (d and head_dim % d):
            raise FormatError(f"invalid codebook shape D={head_dim} d={d} b={b}")
        smoothing = None
        if has_smoothing:
            lam = np.frombuffer(_read_exact(f, 4 * head_dim), dtype="<f4").astype(np.float32)
            try:
                if not lam.min() > 0:
                    raise ValueError("non-positive entry")
                smoothing = SmoothingFactors(lam, float(min(lam.min(), 1e-6)))
            except ValueError as exc:
                raise CorruptionError(f"stored smoothing factors are invalid: {exc}") from exc
        centroids = None
        if b:
            raw = _read_exact(f, 4 * (1 << b) * d)
            centroids = np.frombuffer(raw, dtype="<f4").reshape(1 << b, d).astype(np.float32)
        (n,) = _unpack(f, "I")
        try:
            provenance = _read_exact(f, n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("provenance is not valid UTF-8") from exc
        if f.read(1):
            raise FormatError("trailing bytes after codebook")
    codebook = None
    if centroids is not None:
        codebook = Codebook(VQConfig(d, b, head_dim), centroids, provenance)
    return CodebookFile(head_dim, smoothing, codebook)


# --- cache snapshots --------------------------------------------------------


def snapshot_bytes(cache: QuantizedKVCache) -> bytes:
    cfg = cache.config
    kc, vc = cfg.key_cfg, cfg.value_cfg
    out = io.BytesIO()
    out.write(SNAPSHOT_MAGIC)
    out.write(struct.pack("<IIIBIBI", VERSION, cfg.head_dim, kc.d, kc.b, vc.d, vc.b, cfg.residual_len))
    out.write(struct.pack("<QQQ", cache.n_quantized, cache.n_residual, cache.total_len))
    out.write(pack_codes(cache.key_codes, kc.b).tobytes())
    out.write(pack_codes(cache.value_codes, vc.b).tobytes())
    out.write(np.ascontiguousarray(cache.key_residual, dtype="<f4").tobytes())
    out.write(np.ascontiguousarray(cache.value_residual, dtype="<f4").tobytes())
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def write_snapshot(path, cache: QuantizedKVCache) -> None:
    _atomic_write(path, snapshot_bytes(cache))


def snapshot_from_bytes(data: bytes) -> QuantizedKVCache:
    f = io.BytesIO(data)
    _check_header(f, SNAPSHOT_MAGIC)
    head_dim, kd, kb, vd, vb, residual_len = _unpack(f, "IIBIBI")
    nq, nr, total = _unpack(f, "QQQ")
    if len(data) < 4 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise CorruptionError("snapshot checksum mismatch")
    if nq + nr != total:
        raise CorruptionError("snapshot token counts are inconsistent")
    try:
        cfg = CacheConfig(VQConfig(kd, kb, head_dim), VQConfig(vd, vb, head_dim), residual_len)
    except ValueError as exc:
        raise FormatError(f"invalid cache config in snapshot: {exc}") from exc
    kc, vc = cfg.key_cfg, cfg.value_cfg
    kpacked = np.frombuffer(_read_exact(f, nq * kc.row_bytes), np.uint8).reshape(nq, kc.row_bytes)
    vpacked = np.frombuffer(_read_exact(f, nq * vc.row_bytes), np.uint8).reshape(nq, vc.row_bytes)
    kres = np.frombuffer(_read_exact(f, 4 * nr * head_dim), "<f4").reshape(nr, head_dim)
    vres = np.frombuffer(_read_exact(f, 4 * nr * head_dim), "<f4").reshape(nr, head_dim)
    if len(f.read()) != 4:
        raise FormatError("unexpected bytes after snapshot payload")
    return QuantizedKVCache(
        cfg,
        unpack_codes(kpacked, kc.b, kc.m),
        unpack_codes(vpacked, vc.b, vc.m),
        kres.astype(np.float32),
        vres.astype(np.float32),
    )


def read_snapshot(path) -> QuantizedKVCache:
    with open(path, "rb") as f:
        return snapshot_from_bytes(f.read())


def snapshot_payload_sizes(path) -> dict:
    """Byte sizes of each payload section, counted from the file itself."""
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        _check_header(f, SNAPSHOT_MAGIC)
        head_dim, kd, kb, vd, vb, _ = _unpack(f, "IIBIBI")
        nq, nr, _ = _unpack(f, "QQQ")
        header = f.tell()
    residual = 2 * 4 * nr * head_dim
    codes = size - header - residual - 4
    return {"header": header, "codes": codes, "residual_f32": residual, "n_quantized": nq, "n_residual": nr}
