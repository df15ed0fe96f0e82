"""Seeded self-check suites behind the `check` CLI command: gradient
verification, dominance predicates, transform equivalence, and quantizer
properties.  Each suite returns (passed, human-readable lines); failures
name the seed that produced them.
"""

from __future__ import annotations

import numpy as np

from .block import BlockGraph, BlockMode, BlockParams, PlacementConfig
from .fusion import fuse_block, verify_fusion
from .linalg import is_strictly_diagonally_dominant, random_sdd_matrix
from .quant import (
    PER_CHANNEL,
    PER_GROUP,
    PER_TENSOR,
    QuantConfig,
    compute_qparams,
    fake_quant,
)
from .tape import Graph, check_gradient
from .transform import (
    AffineTransform,
    KIND_DIAGONAL,
    KIND_FULL,
    KIND_PER_HEAD,
    MaskSchedule,
)


def nudge_off_boundaries(x: np.ndarray, qp, margin: float) -> np.ndarray:
    """Move entries away from rounding boundaries of the quantization grid so
    finite differences stay on one side of every rounding decision."""
    x = np.asarray(x, dtype=np.float64).copy()
    cfg = QuantConfig(qp.bits, qp.granularity, qp.group_size)
    from .quant import grouped_view, ungroup

    xg = grouped_view(x, cfg)
    u = xg / qp.delta + qp.zero_point
    frac = u - np.floor(u)
    near = np.abs(frac - 0.5) * qp.delta < margin
    direction = np.where(frac >= 0.5, 1.0, -1.0)
    xg = xg + near * direction * 2.0 * margin
    return ungroup(xg, tuple(x.shape), qp)


def _grad_graph(rng: np.random.Generator, kind: int):
    """One randomized gradient-check case; returns (graph, bindings, leaf, tol)."""
    g = Graph()
    if kind == 0:
        # inverse composition: || X @ A^-1 @ (A @ W) ||_F^2 w.r.t. A
        a = g.leaf("a")
        x = g.const(rng.standard_normal((3, 4)))
        w = g.const(rng.standard_normal((4, 3)))
        g.fro_norm_sq(g.matmul(g.matmul(x, g.inverse(a)), g.matmul(a, w)))
        return g, {"a": random_sdd_matrix(rng, 4)}, "a", 1e-4
    if kind == 1:
        x = g.leaf("x")
        gamma = g.const(1.0 + 0.3 * rng.standard_normal(5))
        beta = g.const(0.2 * rng.standard_normal(5))
        g.fro_norm_sq(g.layernorm(x, gamma, beta))
        return g, {"x": rng.standard_normal((4, 5))}, "x", 1e-4
    if kind == 2:
        x = g.leaf("x")
        v = g.const(rng.standard_normal((4, 4)))
        mask = np.triu(np.full((4, 4), -1e30), k=1)
        g.fro_norm_sq(g.matmul(g.softmax(g.scale(x, 0.5), mask=mask), v))
        return g, {"x": rng.standard_normal((4, 4))}, "x", 1e-4
    if kind == 3:
        w = g.leaf("w")
        x = g.const(rng.standard_normal((3, 4)))
        b = g.const(rng.standard_normal(5))
        act = g.relu if rng.integers(2) else g.gelu
        g.fro_norm_sq(act(g.add(g.matmul(x, w), b)))
        return g, {"w": rng.standard_normal((4, 5))}, "w", 1e-4
    if kind == 4:
        # static fake quant, off rounding boundaries
        w0 = rng.standard_normal((4, 4))
        cfg = QuantConfig(bits=4, granularity=PER_CHANNEL)
        qp = compute_qparams(w0, cfg)
        w0 = nudge_off_boundaries(w0, qp, 1e-3)
        w = g.leaf("w")
        g.fro_norm_sq(g.fake_quant(w, qp))
        return g, {"w": w0}, "w", 1e-4
    if kind == 5:
        x = g.leaf("x")
        y = g.mul(g.transpose(x), g.const(rng.standard_normal((5, 3))))
        g.scale(g.sum_all(y), 0.7)
        return g, {"x": rng.standard_normal((3, 5))}, "x", 1e-4
    # dynamic fake quant: gradient w.r.t. the clip scalars
    w0 = rng.standard_normal((6, 4)) * 2.0
    cfg = QuantConfig(bits=4, granularity=PER_CHANNEL, learnable_clip=True)
    w = g.const(w0)
    lo = g.leaf("lo")
    hi = g.leaf("hi")
    g.fro_norm_sq(g.fake_quant_dynamic(w, cfg, lo, hi))
    # raw clips ~ sigmoid^-1(0.7..0.9): some entries clamp, zp off half-integers
    binding = {
        "lo": rng.uniform(0.9, 2.0, size=4),
        "hi": rng.uniform(0.9, 2.0, size=4),
    }
    return g, binding, "hi" if rng.integers(2) else "lo", 5e-3


def run_grad_suite(seed: int = 0, n_graphs: int = 100):
    lines = []
    worst = 0.0
    worst_core = 0.0
    failures = []
    for i in range(n_graphs):
        rng = np.random.default_rng(seed + i)
        kind = i % 7
        g, bindings, leaf, tol = _grad_graph(rng, kind)
        err = check_gradient(g, bindings, leaf, eps=1e-5)
        worst = max(worst, err)
        if kind < 6:
            worst_core = max(worst_core, err)
        if err > tol:
            failures.append(f"seed {seed + i} (graph kind {kind}): error {err:.3e}")
    lines.append(f"max relative gradient error (core primitives): {worst_core:.3e}")
    lines.append(f"max relative gradient error (all cases): {worst:.3e}")
    lines += failures
    return not failures, lines


def run_sdd_suite(seed: int = 0, trials: int = 1000):
    lines = []
    failures = []
    rng = np.random.default_rng(seed)
    for i in range(trials):
        m = rng.standard_normal((8, 8)) * rng.uniform(0.5, 3.0)
        if rng.integers(2):
            m = random_sdd_matrix(rng, 8)
        got = is_strictly_diagonally_dominant(m)
        want = all(
            abs(m[r, r]) > sum(abs(m[r, c]) for c in range(8) if c != r)
            for r in range(8)
        )
        if got != want:
            failures.append(f"seed {seed} trial {i}: predicate mismatch")
    lines.append(f"{trials} random 8x8 matrices agree with the brute-force check")
    masks_ok = _mask_band_monotone()
    if not masks_ok:
        failures.append("gradual mask band is not monotone")
    lines.append("mask band monotonicity holds on the probe grid")
    lines += failures
    return not failures, lines


def _mask_band_monotone() -> bool:
    for t in (1, 4, 20):
        sched = MaskSchedule(t, 0.25, 8)
        prev = None
        for e in range(1, t + 1):
            from .transform import gradual_mask

            gm = gradual_mask(e, sched, 8)
            nz = gm != 0
            if prev is not None and np.any(prev & ~nz):
                return False
            prev = nz
        if not np.all(prev):
            return False
    return True


def _random_transforms(rng, params, placement):
    d = params.hidden_size
    out = {}
    for place in placement.active_placements():
        kind = placement.kind_for(place)
        if kind == KIND_PER_HEAD:
            hd = params.head_dim
            m = np.zeros((d, d))
            for h in range(params.n_heads):
                s = h * hd
                m[s : s + hd, s : s + hd] = random_sdd_matrix(rng, hd)
            sched = MaskSchedule(1, 1.0, hd)
            out[place] = AffineTransform(m, None, kind, place, sched, head_dim=hd)
        elif kind == KIND_DIAGONAL:
            m = np.diag(rng.uniform(0.5, 2.0, size=d))
            sched = MaskSchedule(1, 1.0, d)
            shift = 0.3 * rng.standard_normal(d) if place != "out_proj" else None
            out[place] = AffineTransform(m, shift, kind, place, sched)
        else:
            m = random_sdd_matrix(rng, d)
            sched = MaskSchedule(1, 1.0, d)
            shift = 0.3 * rng.standard_normal(d)
            out[place] = AffineTransform(m, shift, kind, place, sched)
    return out


EQUIV_PLACEMENT = PlacementConfig(
    pre_qkv=KIND_FULL, pre_out_proj=KIND_PER_HEAD, pre_fc1=KIND_FULL
)
FUSABLE_PLACEMENT = PlacementConfig(
    pre_qkv=KIND_DIAGONAL, pre_out_proj=KIND_PER_HEAD, pre_fc1=KIND_DIAGONAL
)


def run_equiv_suite(seed: int = 0, n_sets: int = 20, tol: float = 1e-8):
    """Quantization off: transformed == full precision == fused."""
    from .linalg import relative_fro_error

    lines = []
    failures = []
    params = BlockParams.random(np.random.default_rng(42), 32, 4)
    x = np.random.default_rng(7).standard_normal((24, 32))
    fp_out = BlockGraph(params, 24, BlockMode.full_precision()).forward(x)
    worst_t = worst_f = 0.0
    for i in range(n_sets):
        rng = np.random.default_rng(seed + i)
        transforms = _random_transforms(rng, params, EQUIV_PLACEMENT)
        mode = BlockMode.transformed(EQUIV_PLACEMENT, transforms)
        err = relative_fro_error(fp_out, BlockGraph(params, 24, mode).forward(x))
        worst_t = max(worst_t, err)
        if err > tol:
            failures.append(f"seed {seed + i}: transformed vs fp error {err:.3e}")
        fus_tr = _random_transforms(rng, params, FUSABLE_PLACEMENT)
        fused = fuse_block(params, fus_tr, None, FUSABLE_PLACEMENT)
        err = verify_fusion(params, fus_tr, None, FUSABLE_PLACEMENT, fused, [x])
        worst_f = max(worst_f, err)
        if err > tol:
            failures.append(f"seed {seed + i}: fused vs transformed error {err:.3e}")
    lines.append(f"transformed vs full precision, worst of {n_sets}: {worst_t:.3e}")
    lines.append(f"fused vs transformed, worst of {n_sets}: {worst_f:.3e}")
    lines += failures
    return not failures, lines


def run_quant_suite(seed: int = 0, n: int = 100_000):
    lines = []
    failures = []
    rng = np.random.default_rng(seed)
    for bits in (2, 3, 4, 8):
        for gran, shape in (
            (PER_TENSOR, (n // 100, 100)),
            (PER_CHANNEL, (n // 100, 100)),
            (PER_GROUP, (n // 100, 100)),
        ):
            cfg = QuantConfig(
                bits=bits,
                granularity=gran,
                group_size=50 if gran == PER_GROUP else None,
            )
            x = rng.standard_normal(shape) * rng.uniform(0.1, 10.0)
            qp = compute_qparams(x, cfg)
            y = fake_quant(x, qp)
            if not np.array_equal(fake_quant(y, qp), y):
                failures.append(f"bits={bits} {gran}: not idempotent (seed {seed})")
            grid = y / ungrouped_delta(qp, x.shape) + qp_zero(qp, x.shape)
            if not np.allclose(grid, np.round(grid), atol=1e-6):
                failures.append(f"bits={bits} {gran}: off grid (seed {seed})")
            half = ungrouped_delta(qp, x.shape) / 2
            in_range = np.abs(y - x) <= half * (1 + 1e-9) + 1e-12
            clipped = is_clipped(x, qp)
            if not np.all(in_range | clipped):
                failures.append(f"bits={bits} {gran}: error > delta/2 (seed {seed})")
    lines.append("idempotence, grid membership and half-step error bound hold")
    lines += failures
    return not failures, lines


def ungrouped_delta(qp, shape):
    from .quant import ungroup

    g = np.broadcast_to(
        qp.delta, (qp.delta.shape[0], int(np.prod(shape)) // qp.delta.shape[0])
    )
    return ungroup(g, tuple(shape), qp)


def qp_zero(qp, shape):
    from .quant import ungroup

    g = np.broadcast_to(
        qp.zero_point,
        (qp.zero_point.shape[0], int(np.prod(shape)) // qp.zero_point.shape[0]),
    )
    return ungroup(g, tuple(shape), qp)


def is_clipped(x, qp):
    from .quant import QuantConfig, grouped_view, round_away, ungroup

    cfg = QuantConfig(qp.bits, qp.granularity, qp.group_size)
    xg = grouped_view(np.asarray(x, dtype=np.float64), cfg)
    idx = round_away(xg / qp.delta) + qp.zero_point
    out = (idx < 0) | (idx > qp.qmax)
    return ungroup(out.astype(bool), tuple(x.shape), qp)


SUITES = {
    "grad": run_grad_suite,
    "sdd": run_sdd_suite,
    "equiv": run_equiv_suite,
    "quant": run_quant_suite,
}
