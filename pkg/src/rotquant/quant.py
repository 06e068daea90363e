"""Round-to-nearest fake quantization and quality metrics.

Symmetric mode uses codes in ``[-(2^(b-1) - 1), 2^(b-1) - 1]`` with
``scale = clip_ratio * max|x_group| / (2^(b-1) - 1)``. Asymmetric mode uses
codes in ``[0, 2^b - 1]`` over the group range widened to include zero.
Rounding is half-away-from-zero everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import as_matrix

GRANULARITIES = ("per-tensor", "per-row", "per-column")


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    symmetric: bool = True
    granularity: str = "per-row"
    clip_ratio: float = 1.0

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        if not 0.0 < self.clip_ratio <= 1.0:
            raise ValueError(f"clip_ratio must be in (0, 1], got {self.clip_ratio}")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.symmetric else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.symmetric else 2**self.bits - 1

    @property
    def levels(self) -> int:
        return self.qmax - self.qmin + 1

    def with_(self, **kw) -> "QuantConfig":
        return replace(self, **kw)


ACTIVATION_DEFAULT = QuantConfig(granularity="per-row")
# weights are stored (C_out, n): one group per output channel is one row
WEIGHT_DEFAULT = QuantConfig(granularity="per-row")


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray
    config: QuantConfig
    shape: tuple[int, int]


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _group_axis(granularity: str):
    return {"per-tensor": None, "per-row": 1, "per-column": 0}[granularity]


def _broadcast(v: np.ndarray, granularity: str) -> np.ndarray:
    if granularity == "per-row":
        return v[:, None]
    if granularity == "per-column":
        return v[None, :]
    return v.reshape(1, 1)


def quantize(x, cfg: QuantConfig = ACTIVATION_DEFAULT) -> QuantizedTensor:
    """RTN-quantize ``x``. A group that is entirely zero gets scale 1."""
    x = as_matrix(x)
    axis = _group_axis(cfg.granularity)
    if cfg.symmetric:
        amax = np.abs(x).max(axis=axis) if x.size else np.zeros(1)
        amax = np.atleast_1d(np.asarray(amax, dtype=np.float64))
        scales = cfg.clip_ratio * amax / cfg.qmax
        scales = np.where(scales == 0.0, 1.0, scales)
        zps = np.zeros_like(scales)
        s = _broadcast(scales, cfg.granularity)
        codes = np.clip(round_half_away(x / s), cfg.qmin, cfg.qmax)
    else:
        lo = np.atleast_1d(np.minimum(x.min(axis=axis), 0.0))
        hi = np.atleast_1d(np.maximum(x.max(axis=axis), 0.0))
        scales = cfg.clip_ratio * (hi - lo) / cfg.qmax
        scales = np.where(scales == 0.0, 1.0, scales)
        zps = round_half_away(-cfg.clip_ratio * lo / scales)
        s = _broadcast(scales, cfg.granularity)
        z = _broadcast(zps, cfg.granularity)
        codes = np.clip(round_half_away(x / s) + z, cfg.qmin, cfg.qmax)
    return QuantizedTensor(
        codes=codes.astype(np.int64),
        scales=scales,
        zero_points=zps,
        config=cfg,
        shape=(int(x.shape[0]), int(x.shape[1])),
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    g = q.config.granularity
    s = _broadcast(q.scales, g)
    z = _broadcast(q.zero_points, g)
    return (q.codes - z) * s


def fake_quant(x, cfg: QuantConfig = ACTIVATION_DEFAULT) -> np.ndarray:
    return dequantize(quantize(x, cfg))


def quant_mse(x, cfg: QuantConfig = ACTIVATION_DEFAULT) -> float:
    x = as_matrix(x)
    d = fake_quant(x, cfg) - x
    return float(np.mean(d * d))


def space_utilization(x, cfg: QuantConfig = ACTIVATION_DEFAULT) -> float:
    """Fraction of integer levels hit by at least one code, averaged over groups."""
    x = as_matrix(x)
    if not np.any(x):
        raise ValueError("space utilization is undefined for an all-zero tensor")
    codes = quantize(x, cfg).codes - cfg.qmin
    if cfg.granularity == "per-column":
        codes = codes.T
    elif cfg.granularity == "per-tensor":
        codes = codes.reshape(1, -1)
    used = np.zeros((codes.shape[0], cfg.levels), dtype=bool)
    rows = np.repeat(np.arange(codes.shape[0]), codes.shape[1])
    used[rows, codes.ravel()] = True
    return float(used.sum(axis=1).mean() / cfg.levels)
