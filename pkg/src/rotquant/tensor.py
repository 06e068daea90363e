"""Dense matrix helpers, seeded RNG and the RQT1 tensor container.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in C
(row-major) order. Randomness always flows through :func:`make_rng`, which
wraps numpy's PCG64 bit generator so a given seed produces the same stream on
every platform.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

RNG_ALGORITHM = "PCG64"
MAGIC = b"RQT1"
_HEADER_LEN = struct.Struct("<I")


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TensorFileError(Exception):
    """Base class for RQT1 container problems."""


class BadMagicError(TensorFileError):
    pass


class HeaderError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class PayloadLengthError(TensorFileError):
    pass


class NonFiniteError(TensorFileError):
    pass


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Return a PCG64-backed generator for ``seed``."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    if int(seed) < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def split_rng(rng: np.random.Generator, count: int) -> list[np.random.Generator]:
    """Derive ``count`` independent child generators from ``rng``."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(count)]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 C-ordered array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix from Gaussian fill + QR.

    The diagonal of the triangular factor is forced positive, which makes
    the result a deterministic function of the Gaussian draw.
    """
    if n < 1:
        raise ValueError(f"dimension must be >= 1, got {n}")
    g = rng.standard_normal((n, n))
    q, r = np.linalg.qr(g)
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return np.ascontiguousarray(q * signs)


def orthogonality_error(q: np.ndarray) -> float:
    """``max |Q^T Q - I|``."""
    q = np.asarray(q, dtype=np.float64)
    return float(np.abs(q.T @ q - np.eye(q.shape[1])).max())


def write_tensor(path, m: np.ndarray) -> None:
    """Write ``m`` as an RQT1 file, atomically (temp file + rename)."""
    m = as_matrix(m)
    header = json.dumps(
        {"dtype": "f64", "shape": [int(m.shape[0]), int(m.shape[1])], "order": "row-major"},
        sort_keys=True,
    ).encode("utf-8")
    payload = m.astype("<f8", copy=False).tobytes(order="C")
    atomic_write_bytes(path, MAGIC + _HEADER_LEN.pack(len(header)) + header + payload)


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}, found {raw[:4]!r}")
    if len(raw) < 8:
        raise HeaderError(f"{path}: missing header length")
    (hlen,) = _HEADER_LEN.unpack_from(raw, 4)
    if len(raw) < 8 + hlen:
        raise HeaderError(f"{path}: header declares {hlen} bytes, file too short")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
        rows, cols = (int(s) for s in header["shape"])
        dtype = header["dtype"]
        order = header.get("order", "row-major")
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise HeaderError(f"{path}: malformed header ({exc})") from exc
    if dtype != "f64" or order != "row-major":
        raise HeaderError(f"{path}: unsupported dtype/order {dtype!r}/{order!r}")
    if rows < 0 or cols < 0:
        raise HeaderError(f"{path}: negative shape {rows}x{cols}")
    payload = raw[8 + hlen :]
    expected = rows * cols * 8
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: shape {rows}x{cols} needs {expected} payload bytes, got {len(payload)}"
        )
    if len(payload) != expected:
        raise PayloadLengthError(
            f"{path}: shape {rows}x{cols} needs {expected} payload bytes, got {len(payload)}"
        )
    m = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
    if not np.isfinite(m).all():
        raise NonFiniteError(f"{path}: payload contains NaN or Inf")
    return m


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
