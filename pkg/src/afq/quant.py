"""Uniform fake quantization: parameter fitting, Eq.-style round-clamp-dequant
forward, and integer export.

Step size and zero point are fitted per tensor, per output channel, or per
input-dimension group.  Rounding ties go away from zero so results are
deterministic across platforms.  Optional clip scalars in (0, 1] shrink the
observed min/max before fitting; the optimizer owns them as sigmoid-squashed
raw parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DELTA_FLOOR = 1e-8

PER_TENSOR = "per-tensor"
PER_CHANNEL = "per-channel"
PER_GROUP = "per-group"

# sigmoid(x) = 1 - 1e-4, the near-full-range starting point for clip scalars
CLIP_RAW_INIT = 9.21024036697585


@dataclass(frozen=True)
class QuantConfig:
    bits: int
    granularity: str = PER_CHANNEL
    group_size: int | None = None
    symmetric: bool = False
    learnable_clip: bool = False

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if self.granularity not in (PER_TENSOR, PER_CHANNEL, PER_GROUP):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == PER_GROUP and not self.group_size:
            raise ValueError("per-group granularity requires group_size")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


@dataclass
class QuantParams:
    """Fitted step sizes and zero points, shaped to broadcast over the
    grouped view of the tensor they were fitted on."""

    delta: np.ndarray
    zero_point: np.ndarray
    bits: int
    granularity: str
    group_size: int | None
    shape: tuple[int, ...]
    clip_lo: np.ndarray | float = 1.0
    clip_hi: np.ndarray | float = 1.0

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


@dataclass
class QuantizedTensor:
    codes: np.ndarray  # integer grid indices in [0, 2^n - 1]
    qparams: QuantParams
    original_shape: tuple[int, ...] = field(default=())

    def dequantize(self) -> np.ndarray:
        qp = self.qparams
        cfg = QuantConfig(qp.bits, qp.granularity, qp.group_size)
        g = grouped_view(self.codes.astype(np.float64), cfg) - qp.zero_point
        return ungroup(qp.delta * g, self.original_shape, qp)


def round_away(x: np.ndarray) -> np.ndarray:
    """Round half away from zero (numpy's round ties to even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def grouped_view(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Reshape so that the last axis runs over one quantization group."""
    if cfg.granularity == PER_TENSOR:
        return x.reshape(1, -1)
    if x.ndim != 2:
        raise ValueError(
            f"{cfg.granularity} quantization expects a 2-D tensor, got {x.shape}"
        )
    din, dout = x.shape
    if cfg.granularity == PER_CHANNEL:
        # one group per output channel: view [dout, din]
        return x.T.reshape(dout, din)
    g = cfg.group_size
    if din % g:
        raise ValueError(f"group size {g} does not divide input dim {din}")
    # groups of g consecutive input-dim entries within each output channel
    return x.reshape(din // g, g, dout).transpose(0, 2, 1).reshape(-1, g)


def ungroup(xg: np.ndarray, shape: tuple[int, ...], qp: QuantParams) -> np.ndarray:
    if qp.granularity == PER_TENSOR:
        return xg.reshape(shape)
    din, dout = shape
    if qp.granularity == PER_CHANNEL:
        return xg.reshape(dout, din).T.copy()
    g = qp.group_size
    return xg.reshape(din // g, dout, g).transpose(0, 2, 1).reshape(din, dout)


def compute_qparams(
    x: np.ndarray,
    cfg: QuantConfig,
    clip_lo: np.ndarray | float = 1.0,
    clip_hi: np.ndarray | float = 1.0,
) -> QuantParams:
    """Fit step size and zero point per group from min/max statistics.

    Asymmetric: delta = (hi*max - lo*min) / (2^n - 1),
                zp    = clamp(round(-lo*min / delta), 0, 2^n - 1).
    Symmetric:  delta = hi * max|x| / (2^(n-1) - 1), zp = 2^(n-1).
    delta is floored at 1e-8 so constant groups stay well defined.
    """
    if x.size == 0:
        raise ValueError("cannot fit quantization parameters on an empty tensor")
    xg = grouped_view(np.asarray(x, dtype=np.float64), cfg)
    qmax = cfg.qmax
    if cfg.symmetric:
        amax = np.abs(xg).max(axis=-1)
        delta = np.maximum(clip_hi * amax / (2 ** (cfg.bits - 1) - 1), DELTA_FLOOR)
        zp = np.full_like(delta, float(2 ** (cfg.bits - 1)))
    else:
        hi = clip_hi * xg.max(axis=-1)
        lo = clip_lo * xg.min(axis=-1)
        delta = np.maximum((hi - lo) / qmax, DELTA_FLOOR)
        zp = np.clip(round_away(-lo / delta), 0, qmax)
    return QuantParams(
        delta=delta[:, None],
        zero_point=zp[:, None],
        bits=cfg.bits,
        granularity=cfg.granularity,
        group_size=cfg.group_size,
        shape=tuple(x.shape),
        clip_lo=clip_lo,
        clip_hi=clip_hi,
    )


def _check_shape(x: np.ndarray, qp: QuantParams) -> None:
    # per-tensor params apply to any shape; grouped params are tied to the
    # shape they were fitted on
    if qp.granularity != PER_TENSOR and tuple(x.shape) != qp.shape:
        raise ValueError(f"tensor shape {x.shape} does not match qparams {qp.shape}")


def fake_quant(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """delta * (clamp(round(x/delta) + zp, 0, 2^n - 1) - zp), per group."""
    _check_shape(x, qp)
    cfg = QuantConfig(qp.bits, qp.granularity, qp.group_size)
    xg = grouped_view(np.asarray(x, dtype=np.float64), cfg)
    q = np.clip(round_away(xg / qp.delta) + qp.zero_point, 0, qp.qmax)
    return ungroup(qp.delta * (q - qp.zero_point), tuple(x.shape), qp).astype(
        x.dtype, copy=False
    )


def quantize_export(x: np.ndarray, qp: QuantParams) -> QuantizedTensor:
    """Integer codes whose dequantization reproduces fake_quant(x) exactly.

    Codes are stored in the original tensor layout."""
    _check_shape(x, qp)
    cfg = QuantConfig(qp.bits, qp.granularity, qp.group_size)
    xg = grouped_view(np.asarray(x, dtype=np.float64), cfg)
    q = np.clip(round_away(xg / qp.delta) + qp.zero_point, 0, qp.qmax)
    dtype = np.uint8 if qp.bits <= 8 else np.uint16
    return QuantizedTensor(
        codes=ungroup(q, tuple(x.shape), qp).astype(dtype),
        qparams=qp,
        original_shape=tuple(x.shape),
    )


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))
