"""Block-wise calibration: minimize the squared-Frobenius gap between the
full-precision and transformed-quantized block outputs by Adam on the
transform matrices, shifts and clip scalars.

One optimizer step per epoch on the mean gradient over calibration batches;
the band mask is rebuilt each epoch, the raw-matrix gradient is scaled by
the mask before the Adam step, and the effective matrix is checked for
strict diagonal dominance at every epoch boundary.  The stability factor is
clipped to 0.9x the running per-row bound whenever that bound is finite,
and halved (with a warning) if dominance is ever lost anyway.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .block import (
    BlockGraph,
    BlockMode,
    BlockParams,
    PlacementConfig,
    PlacementStats,
    PRE_FC1,
    PRE_OUT,
    PRE_QKV,
    collect_stats,
    init_clips,
)
from .linalg import (
    PrecisionScheme,
    SingularMatrixError,
    is_strictly_diagonally_dominant,
    lu_invert,
)
from .transform import (
    AdamState,
    AffineTransform,
    AlphaBoundReport,
    KIND_DIAGONAL,
    KIND_PER_HEAD,
    MaskSchedule,
    alpha_bound,
    clip_alpha_to_bound,
    default_alpha,
    effective_matrix,
    init_diagonal,
    init_shift,
    masked_update,
    recover_from_sdd_violation,
)

FP_CHAINING = "full-precision"
QUANT_CHAINING = "quantized"


@dataclass
class OptimizerConfig:
    epochs: int = 20
    last_block_epochs: int = 40
    lr_affine: float = 1e-3
    lr_clip: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float | None = None  # None -> default_alpha policy
    seed: int = 0
    next_block_input: str = FP_CHAINING
    scheme: PrecisionScheme = PrecisionScheme.DOUBLE
    smooth_exponent: float = 0.5

    def __post_init__(self):
        if self.epochs < 1 or self.last_block_epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_affine < 0 or self.lr_clip < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.next_block_input not in (FP_CHAINING, QUANT_CHAINING):
            raise ValueError(f"unknown chaining mode {self.next_block_input!r}")


class OptimizationDiverged(RuntimeError):
    def __init__(self, reason: str, epoch: int, block: int | None = None):
        self.reason = reason
        self.epoch = epoch
        self.block = block
        where = f"block {block}, " if block is not None else ""
        super().__init__(f"diverged ({reason}) at {where}epoch {epoch}")


@dataclass
class TransformRecord:
    is_sdd: bool
    alpha: float
    alpha_bound_global: float
    condition_estimate: float


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    transforms: dict[str, TransformRecord]


@dataclass
class OptimizationReport:
    records: list[EpochRecord]
    initial_loss: float
    final_loss: float
    alphas: dict[str, float]
    diagonal_only: bool
    wall_time_s: float = 0.0  # informational; excluded from serialized reports


@dataclass
class BlockResult:
    transforms: dict[str, AffineTransform]
    clips: dict[str, np.ndarray]
    report: OptimizationReport


def init_transforms(
    params: BlockParams,
    placement: PlacementConfig,
    stats: dict[str, PlacementStats],
    alpha: float,
    epochs: int,
    exponent: float = 0.5,
) -> dict[str, AffineTransform]:
    """Diagonal-from-statistics init at every active placement; the shift is
    enabled at the LayerNorm-adjacent placements only."""
    d = params.hidden_size
    out: dict[str, AffineTransform] = {}
    for place in placement.active_placements():
        kind = placement.kind_for(place)
        st = stats[place]
        matrix = init_diagonal(st.act_absmax, st.w_absmax, exponent)
        shift = (
            init_shift(st.act_max, st.act_min) if place in (PRE_QKV, PRE_FC1) else None
        )
        head_dim = params.head_dim if kind == KIND_PER_HEAD else None
        band = head_dim if kind == KIND_PER_HEAD else d
        out[place] = AffineTransform(
            matrix=matrix,
            shift=shift,
            kind=kind,
            placement=place,
            schedule=MaskSchedule(epochs, alpha, band),
            head_dim=head_dim,
        )
    return out


def _epoch_masks(transforms, epoch):
    return {p: tr.mask(epoch) for p, tr in transforms.items()}


def optimize_block(
    params: BlockParams,
    calib: list[np.ndarray],
    placement: PlacementConfig,
    cfg: OptimizerConfig,
    epochs: int | None = None,
    block_index: int | None = None,
) -> BlockResult:
    if not calib:
        raise ValueError("calibration set is empty")
    t0 = time.perf_counter()
    t = epochs or cfg.epochs
    d = params.hidden_size
    alpha = cfg.alpha if cfg.alpha is not None else default_alpha(d)
    stats = collect_stats(params, calib)
    transforms = init_transforms(
        params, placement, stats, alpha, t, cfg.smooth_exponent
    )
    clips = init_clips(params, placement)

    fp = BlockMode.full_precision()
    fp_outs = [
        np.asarray(block_forward_cached(params, x, fp), dtype=np.float64)
        for x in calib
    ]

    # Without per-batch activation quantization the batches can be stacked
    # into a single segmented forward; the loss is rescaled to stay the mean
    # over batches.
    stack = placement.act_quant is None and len({x.shape[0] for x in calib}) == 1
    if stack:
        eval_inputs = [np.concatenate(calib, axis=0)]
        eval_refs = [np.concatenate(fp_outs, axis=0)]
        segments = len(calib)
    else:
        eval_inputs = calib
        eval_refs = fp_outs
        segments = 1

    adam_kw = dict(beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    adam_a = {p: AdamState((d, d), **adam_kw) for p in transforms}
    adam_delta = {
        p: AdamState((1, d), **adam_kw)
        for p, tr in transforms.items()
        if tr.shift is not None
    }
    adam_clip = {k: AdamState(v.shape, **adam_kw) for k, v in clips.items()}

    grad_sums = {p: np.zeros((d, d)) for p in transforms}
    init_diags = {p: np.diag(tr.matrix).copy() for p, tr in transforms.items()}
    bounds: dict[str, AlphaBoundReport] = {}
    records: list[EpochRecord] = []

    def eval_epoch(epoch, masks):
        """Mean loss and gradients over the calibration set for one mask set."""
        mode = BlockMode.transformed(placement, transforms, clips, epoch, cfg.scheme)
        graph = BlockGraph(
            params, eval_inputs[0].shape[0], mode, masks, segments=segments
        )
        g = graph.g
        ref = g.leaf("ref", trainable=False)
        scale = 1.0 / len(calib)
        loss_node = g.scale(g.fro_norm_sq(g.sub(graph.out, ref)), scale)
        total = 0.0
        grads: dict[str, np.ndarray] = {}
        raw_astar: dict[str, np.ndarray] = {}
        for x, ref_val in zip(eval_inputs, eval_refs):
            b = graph.bindings(x)
            b["ref"] = ref_val.astype(cfg.scheme.model_dtype)
            total += float(g.forward(b, loss_node))
            batch_grads = g.backward(loss_node)
            for k, v in batch_grads.items():
                grads[k] = grads.get(k, 0.0) + v
            for p in transforms:
                gnode = graph.eff_nodes[p]
                raw_astar[p] = raw_astar.get(p, 0.0) + np.asarray(
                    gnode.grad, dtype=np.float64
                )
        return total, grads, raw_astar

    for e in range(1, t + 1):
        for p, tr in transforms.items():
            if p in bounds:
                clip_alpha_to_bound(tr.schedule, bounds[p])
        masks = _epoch_masks(transforms, e)
        trecs: dict[str, TransformRecord] = {}
        for p, tr in transforms.items():
            eff = effective_matrix(tr.matrix, masks[p])
            if not is_strictly_diagonally_dominant(eff):
                recover_from_sdd_violation(tr.schedule, p, e)
                masks[p] = tr.mask(e)
                eff = effective_matrix(tr.matrix, masks[p])
            try:
                _, diag = lu_invert(eff, cfg.scheme)
                cond = diag.condition_estimate
            except SingularMatrixError as ex:
                raise OptimizationDiverged(
                    f"singular effective matrix at {p}: {ex}", e, block_index
                ) from ex
            trecs[p] = TransformRecord(
                is_sdd=is_strictly_diagonally_dominant(eff),
                alpha=tr.schedule.alpha,
                alpha_bound_global=bounds[p].global_bound if p in bounds else np.inf,
                condition_estimate=cond,
            )
        try:
            loss, grads, raw_astar = eval_epoch(e, masks)
        except SingularMatrixError as ex:
            raise OptimizationDiverged(
                f"singular effective matrix: {ex}", e, block_index
            ) from ex
        if not np.isfinite(loss):
            raise OptimizationDiverged("nan loss", e, block_index)
        records.append(EpochRecord(epoch=e, loss=loss, transforms=trecs))

        for p, tr in transforms.items():
            grad_sums[p] += raw_astar[p]
            bounds[p] = alpha_bound(init_diags[p], grad_sums[p], cfg.lr_affine)
            tr.matrix = masked_update(
                tr.matrix, masks[p], raw_astar[p], cfg.lr_affine, adam_a[p]
            )
            if tr.shift is not None:
                gd = grads.get(f"delta.{p}")
                if gd is not None:
                    tr.shift = (
                        tr.shift.reshape(1, -1)
                        - adam_delta[p].step(gd, cfg.lr_affine)
                    ).reshape(-1)
        for k in clips:
            gc = grads.get(k)
            if gc is not None:
                clips[k] = clips[k] - adam_clip[k].step(gc, cfg.lr_clip)

    final_masks = _epoch_masks(transforms, t)
    try:
        final_loss, _, _ = eval_epoch(t, final_masks)
    except SingularMatrixError as ex:
        raise OptimizationDiverged(
            f"singular effective matrix: {ex}", t, block_index
        ) from ex
    if not np.isfinite(final_loss):
        raise OptimizationDiverged("nan loss", t, block_index)

    report = OptimizationReport(
        records=records,
        initial_loss=records[0].loss,
        final_loss=final_loss,
        alphas={p: tr.schedule.alpha for p, tr in transforms.items()},
        diagonal_only=all(
            tr.kind == KIND_DIAGONAL or tr.schedule.alpha == 0.0
            for tr in transforms.values()
        ),
        wall_time_s=time.perf_counter() - t0,
    )
    return BlockResult(transforms=transforms, clips=clips, report=report)


def block_forward_cached(params, x, mode):
    return BlockGraph(params, x.shape[0], mode).forward(x)


def optimize_model(
    blocks: list[BlockParams],
    calib: list[np.ndarray],
    placement: PlacementConfig,
    cfg: OptimizerConfig,
) -> list[BlockResult]:
    """Optimize blocks in order; the next block's calibration inputs come from
    the previous block in the configured chaining mode."""
    if not blocks:
        raise ValueError("need at least one block")
    results = []
    inputs = calib
    for i, params in enumerate(blocks):
        epochs = cfg.last_block_epochs if i == len(blocks) - 1 and len(blocks) > 1 else cfg.epochs
        res = optimize_block(params, inputs, placement, cfg, epochs, block_index=i)
        results.append(res)
        if i + 1 < len(blocks):
            if cfg.next_block_input == QUANT_CHAINING:
                mode = BlockMode.transformed(
                    placement, res.transforms, res.clips, None, cfg.scheme
                )
            else:
                mode = BlockMode.full_precision()
            inputs = [
                np.asarray(block_forward_cached(params, x, mode), dtype=np.float64)
                for x in inputs
            ]
    return results


def model_forward(blocks, x, modes=None):
    """Chain blocks; modes is a per-block list of BlockMode or None for FP."""
    out = x
    for i, params in enumerate(blocks):
        mode = modes[i] if modes is not None else BlockMode.full_precision()
        out = block_forward_cached(params, out, mode)
    return np.asarray(out, dtype=np.float64)


def _softmax_rows(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def ce_gap(blocks, results, eval_batches, placement, scheme) -> float:
    """Mean KL divergence between the full-precision and quantized model
    output distributions (softmax over channels) on held-out batches."""
    modes = [
        BlockMode.transformed(placement, r.transforms, r.clips, None, scheme)
        for r in results
    ]
    total, count = 0.0, 0
    for x in eval_batches:
        p = _softmax_rows(model_forward(blocks, x))
        q = _softmax_rows(model_forward(blocks, x, modes))
        total += float(np.sum(p * (np.log(p) - np.log(q))))
        count += p.shape[0]
    return total / count


@dataclass
class SweepRow:
    alpha: float
    final_block_loss: float
    ce_gap: float
    diverged: bool = False


def alpha_sweep(
    blocks: list[BlockParams],
    calib: list[np.ndarray],
    placement: PlacementConfig,
    cfg: OptimizerConfig,
    alphas: list[float],
    eval_batches: list[np.ndarray],
) -> tuple[list[SweepRow], dict[float, list[BlockResult]]]:
    """One optimization run per stability factor with shared init/seed;
    diverged runs are recorded, not fatal."""
    if not alphas:
        raise ValueError("alphas is empty")
    rows: list[SweepRow] = []
    per_alpha: dict[float, list[BlockResult]] = {}
    for a in alphas:
        run_cfg = OptimizerConfig(**{**cfg.__dict__, "alpha": a})
        try:
            results = optimize_model(blocks, calib, placement, run_cfg)
        except OptimizationDiverged:
            rows.append(SweepRow(a, float("nan"), float("nan"), diverged=True))
            continue
        gap = ce_gap(blocks, results, eval_batches, placement, run_cfg.scheme)
        rows.append(SweepRow(a, results[-1].report.final_loss, gap))
        per_alpha[a] = results
    return rows, per_alpha


def pearson(xs, ys) -> float:
    if len(xs) < 2:
        return float("nan")
    return float(np.corrcoef(np.asarray(xs), np.asarray(ys))[0, 1])
