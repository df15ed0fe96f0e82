"""Affine transform state: gradual band masks, diagonal/shift initialization,
masked Adam updates, and the per-row stability-factor bound.

The mask for epoch e (out of t) is 1 on the diagonal, alpha inside the band
|i-j| <= (e/t) * band_size and 0 outside; the band comparison is real-valued,
so integer offsets enter as the product crosses them.  Per-head transforms
apply the rule independently inside each head block with band_size equal to
the head dimension, leaving cross-head entries at exactly zero.  The forward
always consumes the Hadamard product matrix * mask; the raw matrix is only
the optimizer's parameterization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .linalg import is_strictly_diagonally_dominant

KIND_FULL = "full"
KIND_DIAGONAL = "diagonal-only"
KIND_PER_HEAD = "per-head"
KINDS = (KIND_FULL, KIND_DIAGONAL, KIND_PER_HEAD)

STAT_FLOOR = 1e-8


@dataclass
class MaskSchedule:
    target_epochs: int
    alpha: float
    hidden_size: int  # dimension the band width is measured against

    def __post_init__(self):
        if self.target_epochs < 1:
            raise ValueError("target_epochs must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


def gradual_mask(
    epoch: int,
    schedule: MaskSchedule,
    dim: int,
    head_dim: int | None = None,
) -> np.ndarray:
    """Band mask for one epoch; block-diagonal when head_dim is given."""
    t = schedule.target_epochs
    if not 1 <= epoch <= t:
        raise ValueError(f"epoch {epoch} outside [1, {t}]")
    if head_dim is None:
        return _band_mask(dim, (epoch / t) * schedule.hidden_size, schedule.alpha)
    if dim % head_dim:
        raise ValueError(f"head_dim {head_dim} does not divide {dim}")
    gm = np.zeros((dim, dim))
    block = _band_mask(head_dim, (epoch / t) * schedule.hidden_size, schedule.alpha)
    for h in range(dim // head_dim):
        s = h * head_dim
        gm[s : s + head_dim, s : s + head_dim] = block
    return gm


def _band_mask(dim: int, width: float, alpha: float) -> np.ndarray:
    offs = np.abs(np.arange(dim)[:, None] - np.arange(dim)[None, :])
    gm = np.where((offs > 0) & (offs <= width), alpha, 0.0)
    np.fill_diagonal(gm, 1.0)
    return gm


def effective_matrix(a: np.ndarray, gm: np.ndarray) -> np.ndarray:
    if a.shape != gm.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {gm.shape}")
    return a * gm


@dataclass
class AffineTransform:
    """One learned transform: raw matrix, optional shift, and its mask state."""

    matrix: np.ndarray  # [d, d]
    shift: np.ndarray | None
    kind: str
    placement: str
    schedule: MaskSchedule
    head_dim: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == KIND_PER_HEAD and not self.head_dim:
            raise ValueError("per-head transform requires head_dim")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def mask(self, epoch: int) -> np.ndarray:
        if self.kind == KIND_DIAGONAL:
            return np.eye(self.dim)
        if self.kind == KIND_PER_HEAD:
            return gradual_mask(epoch, self.schedule, self.dim, self.head_dim)
        return gradual_mask(epoch, self.schedule, self.dim)

    def effective(self, epoch: int) -> np.ndarray:
        return effective_matrix(self.matrix, self.mask(epoch))

    def final_effective(self) -> np.ndarray:
        return self.effective(self.schedule.target_epochs)


def init_diagonal(
    act_absmax: np.ndarray, w_absmax: np.ndarray, exponent: float = 0.5
) -> np.ndarray:
    """Diagonal init from activation/weight magnitude statistics:
    a_jj = act^p / w^(1-p), both floored at 1e-8."""
    if not 0.0 <= exponent <= 1.0:
        raise ValueError("exponent must lie in [0, 1]")
    act = np.maximum(np.asarray(act_absmax, dtype=np.float64), STAT_FLOOR)
    w = np.maximum(np.asarray(w_absmax, dtype=np.float64), STAT_FLOOR)
    return np.diag(act**exponent / w ** (1.0 - exponent))


def init_shift(act_max: np.ndarray, act_min: np.ndarray) -> np.ndarray:
    """Channel-wise midpoint of the observed activation range."""
    act_max = np.asarray(act_max, dtype=np.float64)
    act_min = np.asarray(act_min, dtype=np.float64)
    if np.any(act_max < act_min):
        raise ValueError("act_max must dominate act_min elementwise")
    return 0.5 * (act_max + act_min)


@dataclass
class AlphaBoundReport:
    """Per-row stability bound |n_ii^0 + lr * sum_x dL/dn_ii| /
    (lr * sum_{j!=i} |sum_x dL/dn_ij|), +inf where the denominator is 0."""

    accumulated_diag_grad: np.ndarray
    accumulated_offdiag_grad: np.ndarray
    bound: np.ndarray
    global_bound: float


def alpha_bound(
    init_diag: np.ndarray, grad_sum: np.ndarray, lr: float
) -> AlphaBoundReport:
    """Stability bound from the accumulated raw gradient history.

    grad_sum is the elementwise sum over optimization steps of the loss
    gradient with respect to the masked matrix (before mask scaling).
    """
    init_diag = np.asarray(init_diag, dtype=np.float64)
    grad_sum = np.asarray(grad_sum, dtype=np.float64)
    diag_acc = np.diag(grad_sum).copy()
    off = np.abs(grad_sum).copy()
    np.fill_diagonal(off, 0.0)
    off_acc = off.sum(axis=1)
    num = np.abs(init_diag + lr * diag_acc)
    denom = lr * off_acc
    with np.errstate(divide="ignore"):
        bound = np.where(denom > 0, num / np.maximum(denom, 1e-300), np.inf)
    return AlphaBoundReport(
        accumulated_diag_grad=diag_acc,
        accumulated_offdiag_grad=off_acc,
        bound=bound,
        global_bound=float(bound.min()) if bound.size else np.inf,
    )


class AdamState:
    """Adam moments for one parameter tensor (beta1=0.9, beta2=0.999 defaults)."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape, dtype=np.float64)
        self.v = np.zeros(shape, dtype=np.float64)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        """Return the update to subtract from the parameter."""
        grad = np.asarray(grad, dtype=np.float64)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        return lr * mhat / (np.sqrt(vhat) + self.eps)


def masked_update(
    a: np.ndarray,
    gm: np.ndarray,
    grad_a_star: np.ndarray,
    lr: float,
    state: AdamState,
) -> np.ndarray:
    """One Adam step on the mask-scaled gradient gm * dL/dA*.

    Out-of-band entries receive an exactly-zero gradient, so with zero Adam
    moments they never move; in-band entries have their learning rate scaled
    by alpha through the mask.
    """
    if a.shape != gm.shape or a.shape != grad_a_star.shape:
        raise ValueError("masked_update shape mismatch")
    return a - state.step(gm * grad_a_star, lr)


def default_alpha(hidden_size: int) -> float:
    """Stability-factor policy: full strength for tiny matrices, 1e-2 above."""
    return 1.0 if hidden_size <= 16 else 1e-2


def clip_alpha_to_bound(schedule: MaskSchedule, report: AlphaBoundReport) -> None:
    """Clamp the schedule's alpha to 0.9 * the reported global bound."""
    limit = 0.9 * report.global_bound
    if np.isfinite(limit) and schedule.alpha > limit:
        schedule.alpha = limit


def recover_from_sdd_violation(schedule: MaskSchedule, placement: str, epoch: int):
    """Halve alpha for the remainder of the block and keep going."""
    schedule.alpha *= 0.5
    warnings.warn(
        f"effective matrix at {placement} lost strict diagonal dominance at "
        f"epoch {epoch}; halving alpha to {schedule.alpha:g}",
        RuntimeWarning,
        stacklevel=2,
    )


def dump_heatmap_csv(path, matrix: np.ndarray, normalized: bool = False) -> None:
    """Write a matrix as full-precision CSV, optionally min-max normalized."""
    m = np.asarray(matrix, dtype=np.float64)
    if normalized:
        lo, hi = m.min(), m.max()
        m = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    with open(path, "w") as fh:
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
