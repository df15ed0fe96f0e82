"""Fold learned transforms into adjacent layers so inference carries no
extra operations, plus the precision-scheme merge-error experiment.

Diagonal transforms at the LayerNorm-adjacent placements rewrite the
LayerNorm affine parameters (gamma' = gamma/a, beta' = (beta - shift)/a);
the per-head transform at the out-proj input folds its inverse into the
value projection.  Consuming weights become fake_quant(A_eff @ W) and biases
b + shift @ W, exactly as the transformed forward computes them, so the
fused block reproduces the transformed-quantized block up to operation
reordering.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .block import (
    ACT_SITES,
    BlockGraph,
    BlockMode,
    BlockParams,
    LN_EPS,
    PlacementConfig,
    PRE_FC1,
    PRE_OUT,
    PRE_QKV,
    causal_mask,
)
from .linalg import (
    PrecisionScheme,
    SingularMatrixError,
    lu_invert,
    relative_fro_error,
    scheme_matmul,
)
from .quant import (
    QuantConfig,
    QuantizedTensor,
    compute_qparams,
    fake_quant,
    quantize_export,
    sigmoid,
)
from .tape import layernorm_fwd, relu_fwd, softmax_fwd
from .transform import AffineTransform

# Dominance margin for the merge-error sampler: row sums of the sampled
# matrix equal the margin, so the inverse norm reaches ~1/margin and the
# float schemes show measurable error at desk scale (512 dims) while double
# stays many orders below.
MERGE_SDD_MARGIN = 1e-3


class FusionError(ValueError):
    """Transform cannot be folded (full matrix at a LayerNorm placement)."""


@dataclass
class FusedBlock:
    params: BlockParams
    act_quant: QuantConfig | None = None
    act_clips: dict[str, np.ndarray] | None = None
    weight_export: dict[str, QuantizedTensor] | None = None


def _clip_values(clips: dict[str, np.ndarray] | None, site: str, cfg: QuantConfig):
    lo = hi = 1.0
    if clips and cfg.learnable_clip:
        if f"clip.{site}.lo" in clips:
            lo = sigmoid(np.asarray(clips[f"clip.{site}.lo"], dtype=np.float64))
        if f"clip.{site}.hi" in clips:
            hi = sigmoid(np.asarray(clips[f"clip.{site}.hi"], dtype=np.float64))
    return lo, hi


def _quantize_site(w, site, cfg, clips):
    """Fake-quantize one tensor with the learned clip scalars; also return
    the integer export of the on-grid result."""
    if cfg is None:
        return np.asarray(w, dtype=np.float64), None
    lo, hi = _clip_values(clips, site, cfg)
    qp = compute_qparams(w, cfg, lo, hi)
    return fake_quant(np.asarray(w, dtype=np.float64), qp), quantize_export(w, qp)


def fuse_block(
    params: BlockParams,
    transforms: dict[str, AffineTransform],
    clips: dict[str, np.ndarray] | None,
    placement: PlacementConfig,
    scheme: PrecisionScheme = PrecisionScheme.DOUBLE,
) -> FusedBlock:
    """Merge final effective transforms into the block parameters."""
    p = params.copy()
    wq_cfg = placement.weight_quant
    export: dict[str, QuantizedTensor] = {}

    def consume(site: str, w: np.ndarray, a_eff=None, shift=None):
        """Effective consuming weight Q(A_eff @ W) and bias b + shift @ W."""
        w_eff = w if a_eff is None else scheme_matmul(
            a_eff, w, scheme, transform_side=True
        )
        w_q, code = _quantize_site(w_eff, site, wq_cfg, clips)
        if code is not None:
            export[site] = code
        b = getattr(p, site.replace("w_", "b_")).astype(np.float64)
        if shift is not None:
            b = b + shift @ np.asarray(w, dtype=np.float64)
        setattr(p, site, w_q)
        setattr(p, site.replace("w_", "b_"), b)

    def ln_fold(tr: AffineTransform, gamma_name: str, beta_name: str):
        a_eff = tr.final_effective()
        off = a_eff.copy()
        np.fill_diagonal(off, 0.0)
        if np.any(off != 0.0):
            raise FusionError(
                f"transform at {tr.placement} is not diagonal; a full matrix "
                "cannot fold into elementwise LayerNorm parameters"
            )
        a = np.diag(a_eff)
        shift = tr.shift if tr.shift is not None else np.zeros(a.size)
        setattr(p, gamma_name, getattr(p, gamma_name) / a)
        setattr(p, beta_name, (getattr(p, beta_name) - shift) / a)
        return a_eff, tr.shift

    # qkv placement: rewrite ln1, transform+quantize the q/k/v weights
    if PRE_QKV in transforms:
        a_eff, shift = ln_fold(transforms[PRE_QKV], "ln1_gamma", "ln1_beta")
        for site in ("w_q", "w_k", "w_v"):
            consume(site, params.weight(site), a_eff, shift)
    else:
        for site in ("w_q", "w_k", "w_v"):
            consume(site, params.weight(site))

    # out-proj placement: fold A^-1 into the (already transformed/quantized)
    # value projection, transform+quantize w_out
    if PRE_OUT in transforms:
        tr = transforms[PRE_OUT]
        a_eff = tr.final_effective()
        a_inv, _ = lu_invert(a_eff, scheme)
        shift = tr.shift
        b_v = p.b_v if shift is None else p.b_v - shift
        p.w_v = scheme_matmul(
            np.asarray(p.w_v, dtype=a_inv.dtype), a_inv, scheme, transform_side=True
        ).astype(np.float64)
        p.b_v = scheme_matmul(
            b_v.reshape(1, -1).astype(a_inv.dtype),
            a_inv,
            scheme,
            transform_side=True,
        ).reshape(-1).astype(np.float64)
        consume("w_out", params.w_out, a_eff, shift)
    else:
        consume("w_out", params.w_out)

    # fc1 placement: rewrite ln2, transform+quantize w_fc1
    if PRE_FC1 in transforms:
        a_eff, shift = ln_fold(transforms[PRE_FC1], "ln2_gamma", "ln2_beta")
        consume("w_fc1", params.w_fc1, a_eff, shift)
    else:
        consume("w_fc1", params.w_fc1)

    consume("w_fc2", params.w_fc2)

    act_clips = None
    if placement.act_quant is not None and clips:
        act_clips = {
            k: v for k, v in clips.items() if any(s in k for s in ACT_SITES)
        }
    return FusedBlock(
        params=p,
        act_quant=placement.act_quant,
        act_clips=act_clips,
        weight_export=export or None,
    )


def fused_forward(fused: FusedBlock, x: np.ndarray) -> np.ndarray:
    """Plain forward on the rewritten parameters; activation fake-quant is
    applied at the original placement points when configured."""
    p = fused.params
    aq = fused.act_quant

    def act_q(site, v):
        if aq is None:
            return v
        lo, hi = _clip_values(fused.act_clips, site, aq)
        return fake_quant(v, compute_qparams(v, aq, lo, hi))

    x = np.asarray(x, dtype=np.float64)
    h1 = act_q("act_qkv", layernorm_fwd(x, p.ln1_gamma, p.ln1_beta, LN_EPS))
    q = h1 @ p.w_q + p.b_q
    k = h1 @ p.w_k + p.b_k
    v = h1 @ p.w_v + p.b_v
    hd = p.head_dim
    cm = causal_mask(x.shape[0])
    heads = []
    for h in range(p.n_heads):
        s, e = h * hd, (h + 1) * hd
        scores = (q[:, s:e] @ k[:, s:e].T) / np.sqrt(hd) + cm
        heads.append(softmax_fwd(scores) @ v[:, s:e])
    attn = act_q("act_out_proj", np.concatenate(heads, axis=1))
    x2 = x + attn @ p.w_out + p.b_out
    h2 = act_q("act_fc1", layernorm_fwd(x2, p.ln2_gamma, p.ln2_beta, LN_EPS))
    m1 = act_q("act_fc2", relu_fwd(h2 @ p.w_fc1 + p.b_fc1))
    return x2 + m1 @ p.w_fc2 + p.b_fc2


def verify_fusion(
    params: BlockParams,
    transforms: dict[str, AffineTransform],
    clips: dict[str, np.ndarray] | None,
    placement: PlacementConfig,
    fused: FusedBlock,
    calib: list[np.ndarray],
    scheme: PrecisionScheme = PrecisionScheme.DOUBLE,
) -> float:
    """Max relative Frobenius error between the transformed-quantized block
    and the fused block over the calibration batches."""
    mode = BlockMode.transformed(placement, transforms, clips, None, scheme)
    worst = 0.0
    for x in calib:
        ref = BlockGraph(params, x.shape[0], mode).forward(x)
        out = fused_forward(fused, x)
        worst = max(worst, relative_fro_error(ref, out))
    return worst


def param_count(params: BlockParams) -> int:
    return sum(
        v.size for v in params.__dict__.values() if isinstance(v, np.ndarray)
    )


# -- merge-error experiment ----------------------------------------------------


@dataclass(frozen=True)
class MergeErrorResult:
    scheme: PrecisionScheme
    dims: int
    tokens: int
    trials: int
    mean_mse: float


def sample_merge_matrix(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random strictly diagonally dominant matrix whose inverse norm attains
    the dominance bound: nonpositive off-diagonals, diagonal set to
    margin + row-abs-sum (every row sums to the margin)."""
    c = np.abs(rng.standard_normal((n, n)))
    np.fill_diagonal(c, 0.0)
    a = -c
    a[np.diag_indices(n)] = MERGE_SDD_MARGIN + c.sum(axis=1)
    return a


def _merge_trial(seed_child, dim_in, dim_out, tokens, scheme) -> float:
    rng = np.random.default_rng(seed_child)
    a64 = sample_merge_matrix(rng, dim_in)
    x64 = rng.standard_normal((tokens, dim_in))
    w64 = rng.standard_normal((dim_in, dim_out)) / np.sqrt(dim_in)
    md = scheme.model_dtype
    x = x64.astype(md)
    w = w64.astype(md)
    a = a64.astype(scheme.transform_dtype)
    ref = scheme_matmul(x, w, scheme)
    a_inv, _ = lu_invert(a, scheme)
    xa = scheme_matmul(x, a_inv, scheme, transform_side=True)
    aw = scheme_matmul(a, w, scheme, transform_side=True)
    out = scheme_matmul(xa, aw, scheme)
    diff = out.astype(np.float64) - ref.astype(np.float64)
    return float(np.mean(diff * diff))


def merge_error_experiment(
    dim_in: int,
    dim_out: int,
    tokens: int,
    trials: int,
    scheme: PrecisionScheme,
    seed: int,
) -> MergeErrorResult:
    """Mean MSE between X @ W and (X @ A^-1)(A @ W) over random trials.

    Trials use independent child seeds of the master seed and reduce in a
    fixed order; AFQ_THREADS > 1 fans trials out to a thread pool without
    changing the result.
    """
    if dim_in < 2 or dim_out < 2:
        raise ValueError("dims must be >= 2")
    if tokens < 1 or trials < 1:
        raise ValueError("tokens and trials must be >= 1")
    children = np.random.SeedSequence(seed).spawn(trials)

    def run(child) -> float:
        try:
            return _merge_trial(child, dim_in, dim_out, tokens, scheme)
        except SingularMatrixError:
            # one resample per trial, then give up
            return _merge_trial(child.spawn(1)[0], dim_in, dim_out, tokens, scheme)

    workers = int(os.environ.get("AFQ_THREADS", "1") or "1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(run, children))
    else:
        values = [run(c) for c in children]
    return MergeErrorResult(
        scheme=scheme,
        dims=dim_in,
        tokens=tokens,
        trials=trials,
        mean_mse=float(np.mean(values)),
    )
