"""Reverse-mode differentiation over matrix expressions.

A Graph records primitive applications in topological order; forward
evaluation caches every intermediate value and backward walks the list in
reverse accumulating vector-Jacobian products.  The primitive set is just
large enough to express a transformer block loss: matmul, elementwise
arithmetic, matrix inverse, layernorm, masked softmax, relu/gelu, fake
quantization with a straight-through estimator, and Frobenius-norm
reductions.

Graphs are rebuilt per optimization step and are single-use per thread.
Gradients are computed in float64 regardless of the forward storage dtype;
forward mixed-precision behaviour follows the graph's PrecisionScheme.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import erf

from .linalg import PrecisionScheme, lu_invert
from .quant import (
    DELTA_FLOOR,
    QuantConfig,
    QuantParams,
    _check_shape,
    grouped_view,
    round_away,
    sigmoid,
    ungroup,
)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def layernorm_fwd(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gamma + beta


def softmax_fwd(z):
    """Row-wise softmax, computed in float64 internally."""
    z64 = z.astype(np.float64, copy=False)
    e = np.exp(z64 - z64.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).astype(z.dtype, copy=False)


def relu_fwd(x):
    return np.maximum(x, 0)


def gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


class Node:
    __slots__ = ("graph", "idx", "op", "args", "extra", "value", "grad")

    def __init__(self, graph, idx, op, args, extra):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.args = args
        self.extra = extra
        self.value = None
        self.grad = None

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __add__(self, other):
        return self.graph.add(self, other)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __repr__(self):
        return f"Node({self.idx}:{self.op})"


class Graph:
    def __init__(self, scheme: PrecisionScheme = PrecisionScheme.DOUBLE):
        self.scheme = scheme
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}
        self.trainable: dict[str, bool] = {}
        # When set, fake-quant nodes evaluate their straight-through
        # surrogate (rounding replaced by identity) so central differences
        # measure the same function the STE backward linearizes.
        self.surrogate = False

    def _push(self, op, args, **extra) -> Node:
        node = Node(self, len(self.nodes), op, tuple(a.idx for a in args), extra)
        self.nodes.append(node)
        return node

    # -- graph construction -------------------------------------------------

    def leaf(self, name: str, trainable: bool = True) -> Node:
        if name in self.leaves:
            return self.leaves[name]
        node = self._push("leaf", (), name=name)
        self.leaves[name] = node
        self.trainable[name] = trainable
        return node

    def const(self, value) -> Node:
        return self._push("const", (), value=np.asarray(value))

    def matmul(self, a: Node, b: Node, transform_side: bool = False) -> Node:
        return self._push("matmul", (a, b), transform_side=transform_side)

    def add(self, a: Node, b: Node) -> Node:
        return self._push("add", (a, b))

    def sub(self, a: Node, b: Node) -> Node:
        return self._push("sub", (a, b))

    def mul(self, a: Node, b: Node) -> Node:
        return self._push("mul", (a, b))

    def scale(self, a: Node, c: float) -> Node:
        return self._push("scale", (a,), c=float(c))

    def inverse(self, a: Node, tag: str = "") -> Node:
        """Matrix inverse; backward uses -M^-T @ upstream @ M^-T."""
        return self._push("inverse", (a,), tag=tag)

    def transpose(self, a: Node) -> Node:
        """Swap the last two axes."""
        return self._push("transpose", (a,))

    def slice_cols(self, a: Node, start: int, stop: int) -> Node:
        return self._push("slice_cols", (a,), start=start, stop=stop)

    def concat_cols(self, parts: list[Node]) -> Node:
        return self._push("concat_cols", tuple(parts))

    def seg_split(self, a: Node, segments: int) -> Node:
        """Reshape [s*t, k] into [s, t, k] so row segments batch through
        3-D matmul/softmax without attending across segment boundaries."""
        return self._push("seg_split", (a,), segments=segments)

    def seg_merge(self, a: Node) -> Node:
        """Inverse of seg_split: [s, t, k] back to [s*t, k]."""
        return self._push("seg_merge", (a,))

    def layernorm(self, x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
        return self._push("layernorm", (x, gamma, beta), eps=eps)

    def softmax(self, a: Node, mask: np.ndarray | None = None) -> Node:
        """Row-wise softmax; an optional constant mask is added pre-softmax."""
        m = None if mask is None else np.asarray(mask, dtype=np.float64)
        return self._push("softmax", (a,), mask=m)

    def relu(self, a: Node) -> Node:
        return self._push("relu", (a,))

    def gelu(self, a: Node) -> Node:
        return self._push("gelu", (a,))

    def fake_quant(self, x: Node, qp: QuantParams) -> Node:
        """Fake quantization with fixed parameters.

        Straight-through gradient: upstream passes unchanged where the
        pre-clamp index round(x/delta) + zp lies inside [0, 2^n - 1] and is
        zero outside.
        """
        if np.any(np.asarray(qp.delta) <= 0):
            raise ValueError("invalid qparams: delta must be positive")
        if np.any(np.asarray(qp.zero_point) < 0) or np.any(
            np.asarray(qp.zero_point) > qp.qmax
        ):
            raise ValueError("invalid qparams: zero point out of range")
        return self._push("fake_quant", (x,), qp=qp)

    def fake_quant_dynamic(
        self,
        x: Node,
        cfg: QuantConfig,
        clip_lo: Node | None = None,
        clip_hi: Node | None = None,
    ) -> Node:
        """Fake quantization with parameters refitted from the operand value.

        Step size and zero point are recomputed from the current group
        min/max each forward (treated as constants by the x-gradient, which
        is the plain straight-through rule).  Optional clip operands are raw
        scalars per group, squashed through a sigmoid into (0, 1) and applied
        multiplicatively to the observed min/max; they receive analytic
        gradients through the clamped branches.
        """
        args = [x]
        has_lo = clip_lo is not None
        has_hi = clip_hi is not None
        if has_lo:
            args.append(clip_lo)
        if has_hi:
            args.append(clip_hi)
        return self._push(
            "fake_quant_dynamic", tuple(args), cfg=cfg, has_lo=has_lo, has_hi=has_hi
        )

    def fro_norm_sq(self, a: Node) -> Node:
        return self._push("fro_norm_sq", (a,))

    def sum_all(self, a: Node) -> Node:
        return self._push("sum_all", (a,))

    # -- evaluation ----------------------------------------------------------

    def forward(self, bindings: dict[str, np.ndarray], root: Node | None = None):
        """Evaluate every node and return the root value (last node by default)."""
        if not self.nodes:
            raise ValueError("empty graph")
        for node in self.nodes:
            node.value = self._eval(node, bindings)
        return (root or self.nodes[-1]).value

    def backward(self, root: Node | None = None) -> dict[str, np.ndarray]:
        """Reverse pass from an already-evaluated scalar root.

        Returns gradients for the trainable leaves, each in float64.
        """
        root = root or self.nodes[-1]
        if root.value is None:
            raise ValueError("forward must run before backward")
        if np.shape(root.value) != ():
            raise ValueError(f"root must be scalar, got shape {np.shape(root.value)}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.float64(1.0)
        for node in reversed(self.nodes[: root.idx + 1]):
            if node.grad is None:
                continue
            self._vjp(node)
        out = {}
        for name, node in self.leaves.items():
            if not self.trainable[name]:
                continue
            g = node.grad
            if g is None:
                g = np.zeros(np.shape(node.value), dtype=np.float64)
            out[name] = np.asarray(g, dtype=np.float64)
        return out

    def gradients(
        self, bindings: dict[str, np.ndarray], root: Node | None = None
    ) -> dict[str, np.ndarray]:
        self.forward(bindings, root)
        return self.backward(root)

    # -- forward rules ---------------------------------------------------------

    def _eval(self, node: Node, bindings):
        op = node.op
        vals = [self.nodes[i].value for i in node.args]
        if op == "leaf":
            name = node.extra["name"]
            if name not in bindings:
                raise KeyError(f"unbound leaf {name!r}")
            return np.asarray(bindings[name])
        if op == "const":
            return node.extra["value"]
        if op == "matmul":
            a, b = vals
            if (
                a.ndim != b.ndim
                or a.ndim not in (2, 3)
                or a.shape[-1] != b.shape[-2]
                or a.shape[:-2] != b.shape[:-2]
            ):
                raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
            if node.extra["transform_side"]:
                c = self.scheme.compute_dtype
                return (a.astype(c, copy=False) @ b.astype(c, copy=False)).astype(
                    self.scheme.model_dtype, copy=False
                )
            return a @ b
        if op in ("add", "sub"):
            a, b = vals
            row_broadcast = a.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1]))
            if a.shape != b.shape and not row_broadcast:
                raise ValueError(f"{op} shape mismatch: {a.shape} vs {b.shape}")
            return a + b if op == "add" else a - b
        if op == "mul":
            a, b = vals
            if a.shape != b.shape:
                raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
            return a * b
        if op == "scale":
            return vals[0] * node.extra["c"]
        if op == "inverse":
            inv, diag = lu_invert(vals[0], self.scheme)
            node.extra["diagnostics"] = diag
            return inv
        if op == "transpose":
            return np.swapaxes(vals[0], -1, -2)
        if op == "slice_cols":
            return vals[0][:, node.extra["start"] : node.extra["stop"]]
        if op == "concat_cols":
            return np.concatenate(vals, axis=1)
        if op == "seg_split":
            s = node.extra["segments"]
            t, k = vals[0].shape
            if t % s:
                raise ValueError(f"{s} segments do not divide {t} rows")
            return np.ascontiguousarray(vals[0]).reshape(s, t // s, k)
        if op == "seg_merge":
            s, t, k = vals[0].shape
            return np.ascontiguousarray(vals[0]).reshape(s * t, k)
        if op == "layernorm":
            x, gamma, beta = vals
            eps = node.extra["eps"]
            mu = x.mean(axis=-1, keepdims=True)
            var = x.var(axis=-1, keepdims=True)
            rstd = 1.0 / np.sqrt(var + eps)
            xhat = (x - mu) * rstd
            node.extra["cache"] = (xhat, rstd, gamma)
            return xhat * gamma + beta
        if op == "softmax":
            z = vals[0].astype(np.float64, copy=False)
            if node.extra["mask"] is not None:
                z = z + node.extra["mask"]
            e = np.exp(z - z.max(axis=-1, keepdims=True))
            s = e / e.sum(axis=-1, keepdims=True)
            node.extra["cache"] = s
            return s.astype(vals[0].dtype, copy=False)
        if op == "relu":
            return relu_fwd(vals[0])
        if op == "gelu":
            return gelu_fwd(vals[0])
        if op == "fake_quant":
            return self._fq_static_fwd(node, vals[0])
        if op == "fake_quant_dynamic":
            return self._fq_dynamic_fwd(node, vals)
        if op == "fro_norm_sq":
            return np.float64(np.sum(vals[0].astype(np.float64) ** 2))
        if op == "sum_all":
            return np.float64(np.sum(vals[0].astype(np.float64)))
        raise AssertionError(f"unknown op {op}")

    def _fq_static_fwd(self, node, x):
        qp: QuantParams = node.extra["qp"]
        _check_shape(x, qp)
        cfg = QuantConfig(qp.bits, qp.granularity, qp.group_size)
        xg = grouped_view(x.astype(np.float64, copy=False), cfg)
        idx = round_away(xg / qp.delta) + qp.zero_point
        shape = tuple(x.shape)
        in_range = (idx >= 0) & (idx <= qp.qmax)
        node.extra["in_range"] = ungroup(in_range.astype(np.float64), shape, qp)
        if self.surrogate:
            yg = np.where(
                in_range,
                xg,
                qp.delta * (np.clip(idx, 0, qp.qmax) - qp.zero_point),
            )
            return ungroup(yg, shape, qp).astype(x.dtype, copy=False)
        q = np.clip(idx, 0, qp.qmax)
        y = ungroup(qp.delta * (q - qp.zero_point), shape, qp)
        return y.astype(x.dtype, copy=False)

    def _fq_dynamic_fwd(self, node, vals):
        x = vals[0]
        cfg: QuantConfig = node.extra["cfg"]
        qmax = cfg.qmax
        xg = grouped_view(x.astype(np.float64, copy=False), cfg)
        k = 1
        c_lo = sigmoid(np.asarray(vals[k], dtype=np.float64)) if node.extra["has_lo"] else 1.0
        k += 1 if node.extra["has_lo"] else 0
        c_hi = sigmoid(np.asarray(vals[k], dtype=np.float64)) if node.extra["has_hi"] else 1.0
        gmax = xg.max(axis=-1)
        gmin = xg.min(axis=-1)
        if cfg.symmetric:
            amax = np.abs(xg).max(axis=-1)
            raw_delta = c_hi * amax / (2 ** (cfg.bits - 1) - 1)
            delta = np.maximum(raw_delta, DELTA_FLOOR)
            zp_real = np.full_like(delta, float(2 ** (cfg.bits - 1)))
        else:
            raw_delta = (c_hi * gmax - c_lo * gmin) / qmax
            delta = np.maximum(raw_delta, DELTA_FLOOR)
            zp_real = -c_lo * gmin / delta
        zp = np.clip(round_away(zp_real), 0, qmax)
        zp_surr = np.clip(zp_real, 0, qmax)  # STE linearization point
        d = delta[:, None]
        if self.surrogate:
            u = xg / d + zp_surr[:, None]
            lo = u < 0
            hi = u > qmax
            yg = d * (np.clip(u, 0, qmax) - zp_surr[:, None])
        else:
            idx = round_away(xg / d) + zp[:, None]
            lo = idx < 0
            hi = idx > qmax
            yg = d * (np.clip(idx, 0, qmax) - zp[:, None])
        y = ungroup(yg, tuple(x.shape), _ParamsView(cfg, x.shape))
        node.extra["cache"] = {
            "xshape": tuple(x.shape),
            "c_lo": c_lo,
            "c_hi": c_hi,
            "gmax": gmax,
            "gmin": gmin,
            "delta": delta,
            "zp_real": zp_real,
            "zp_surr": zp_surr,
            "zp": zp,
            "lo": lo,
            "hi": hi,
            "floored": raw_delta < DELTA_FLOOR,
            "zp_clamped": (zp_real < 0) | (zp_real > qmax),
        }
        return y.astype(x.dtype, copy=False)

    # -- backward rules --------------------------------------------------------

    def _acc(self, idx: int, g):
        node = self.nodes[idx]
        g = np.asarray(g, dtype=np.float64)
        node.grad = g if node.grad is None else node.grad + g

    def _vjp(self, node: Node):
        op = node.op
        if op in ("leaf", "const"):
            return
        up = node.grad
        vals = [self.nodes[i].value for i in node.args]
        if op == "matmul":
            a, b = vals
            bt = np.swapaxes(b.astype(np.float64, copy=False), -1, -2)
            at = np.swapaxes(a.astype(np.float64, copy=False), -1, -2)
            self._acc(node.args[0], up @ bt)
            self._acc(node.args[1], at @ up)
        elif op in ("add", "sub"):
            a, b = vals
            sgn = 1.0 if op == "add" else -1.0
            self._acc(node.args[0], up)
            gb = sgn * up
            if b.shape != a.shape and np.ndim(up) == 2:
                gb = gb.sum(axis=0, keepdims=b.ndim == 2)
            self._acc(node.args[1], gb)
        elif op == "mul":
            a, b = vals
            self._acc(node.args[0], up * b)
            self._acc(node.args[1], up * a)
        elif op == "scale":
            self._acc(node.args[0], up * node.extra["c"])
        elif op == "inverse":
            y = node.value.astype(np.float64, copy=False)
            self._acc(node.args[0], -(y.T @ up @ y.T))
        elif op == "transpose":
            self._acc(node.args[0], np.swapaxes(up, -1, -2))
        elif op == "slice_cols":
            g = np.zeros(vals[0].shape, dtype=np.float64)
            g[:, node.extra["start"] : node.extra["stop"]] = up
            self._acc(node.args[0], g)
        elif op == "concat_cols":
            off = 0
            for i, v in zip(node.args, vals):
                w = v.shape[1]
                self._acc(i, up[:, off : off + w])
                off += w
        elif op == "seg_split":
            self._acc(node.args[0], up.reshape(vals[0].shape))
        elif op == "seg_merge":
            self._acc(node.args[0], up.reshape(vals[0].shape))
        elif op == "layernorm":
            xhat, rstd, gamma = node.extra["cache"]
            dxhat = up * gamma
            dx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            self._acc(node.args[0], dx)
            self._acc(node.args[1], (up * xhat).sum(axis=0))
            self._acc(node.args[2], up.sum(axis=0))
        elif op == "softmax":
            s = node.extra["cache"]
            self._acc(
                node.args[0], s * (up - (up * s).sum(axis=-1, keepdims=True))
            )
        elif op == "relu":
            self._acc(node.args[0], up * (vals[0] > 0))
        elif op == "gelu":
            x = vals[0].astype(np.float64, copy=False)
            phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
            dens = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            self._acc(node.args[0], up * (phi + x * dens))
        elif op == "fake_quant":
            self._acc(node.args[0], up * node.extra["in_range"])
        elif op == "fake_quant_dynamic":
            self._fq_dynamic_bwd(node, up)
        elif op == "fro_norm_sq":
            self._acc(node.args[0], 2.0 * up * vals[0].astype(np.float64, copy=False))
        elif op == "sum_all":
            self._acc(node.args[0], up * np.ones(vals[0].shape, dtype=np.float64))
        else:
            raise AssertionError(f"unknown op {op}")

    def _fq_dynamic_bwd(self, node: Node, up):
        cfg: QuantConfig = node.extra["cfg"]
        c = node.extra["cache"]
        qmax = cfg.qmax
        upg = grouped_view(np.asarray(up, dtype=np.float64), cfg)
        lo, hi = c["lo"], c["hi"]
        in_range = ~(lo | hi)
        self._acc(
            node.args[0],
            ungroup(
                upg * in_range, c["xshape"], _ParamsView(cfg, c["xshape"])
            ),
        )
        if not (node.extra["has_lo"] or node.extra["has_hi"]):
            return
        delta = c["delta"]
        zp = c["zp_surr"]  # unrounded zero point: the STE linearization
        # out-of-range branches: low -> delta*(-zp), high -> delta*(qmax - zp)
        g_delta = (upg * lo).sum(axis=-1) * (-zp) + (upg * hi).sum(axis=-1) * (
            qmax - zp
        )
        g_zp = (upg * (lo | hi)).sum(axis=-1) * (-delta)
        live = ~c["floored"]
        zp_live = live & ~c["zp_clamped"]
        karg = 1
        if cfg.symmetric:
            amax = np.maximum(np.abs(c["gmax"]), np.abs(c["gmin"]))
            dd_dhi = amax / (2 ** (cfg.bits - 1) - 1)
            if node.extra["has_lo"]:
                self._acc(node.args[karg], np.zeros_like(delta))
                karg += 1
            if node.extra["has_hi"]:
                g_hi = np.where(live, g_delta * dd_dhi, 0.0)
                c_hi = c["c_hi"]
                self._acc(node.args[karg], g_hi * c_hi * (1.0 - c_hi))
            return
        dd_dhi = c["gmax"] / qmax
        dd_dlo = -c["gmin"] / qmax
        common = c["c_lo"] * c["gmin"] / (delta * delta)
        dzp_dlo = -c["gmin"] / delta + common * dd_dlo
        dzp_dhi = common * dd_dhi
        if node.extra["has_lo"]:
            g_lo = np.where(live, g_delta * dd_dlo, 0.0) + np.where(
                zp_live, g_zp * dzp_dlo, 0.0
            )
            c_lo = c["c_lo"]
            self._acc(node.args[karg], g_lo * c_lo * (1.0 - c_lo))
            karg += 1
        if node.extra["has_hi"]:
            g_hi = np.where(live, g_delta * dd_dhi, 0.0) + np.where(
                zp_live, g_zp * dzp_dhi, 0.0
            )
            c_hi = c["c_hi"]
            self._acc(node.args[karg], g_hi * c_hi * (1.0 - c_hi))


class _ParamsView:
    """Minimal stand-in carrying the grouping info ungroup needs."""

    def __init__(self, cfg: QuantConfig, shape):
        self.granularity = cfg.granularity
        self.group_size = cfg.group_size
        self.shape = tuple(shape)


def check_gradient(
    graph: Graph,
    bindings: dict[str, np.ndarray],
    leaf: str,
    eps: float = 1e-5,
    root: Node | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Numeric passes evaluate fake-quant nodes on their straight-through
    surrogate (rounding treated as identity), which is the function the STE
    backward differentiates.  The caller keeps fake-quant operands at
    distance greater than ~10*eps from rounding and clamp boundaries; see
    fake_quant_boundary_distance.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    analytic = graph.gradients(bindings, root)[leaf]
    x0 = np.asarray(bindings[leaf], dtype=np.float64)
    numeric = np.zeros(x0.shape, dtype=np.float64)
    pert = dict(bindings)
    graph.surrogate = True
    try:
        for idx in np.ndindex(x0.shape) if x0.shape else [()]:
            xp = x0.copy()
            xp[idx] = x0[idx] + eps
            pert[leaf] = xp
            lp = float(graph.forward(pert, root))
            xm = x0.copy()
            xm[idx] = x0[idx] - eps
            pert[leaf] = xm
            lm = float(graph.forward(pert, root))
            numeric[idx] = (lp - lm) / (2.0 * eps)
    finally:
        graph.surrogate = False
    pert[leaf] = x0
    graph.forward(pert, root)  # restore cached values
    a = np.asarray(analytic, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-3)
    err = np.abs(a - numeric) / denom
    return float(err.max()) if err.size else 0.0


def fake_quant_boundary_distance(x: np.ndarray, qp: QuantParams) -> float:
    """Smallest distance (in units of x) from any entry to a rounding or
    clamp boundary of the quantization grid."""
    cfg = QuantConfig(qp.bits, qp.granularity, qp.group_size)
    xg = grouped_view(np.asarray(x, dtype=np.float64), cfg)
    u = xg / qp.delta + qp.zero_point
    frac_dist = np.abs(u - np.floor(u) - 0.5)
    return float((frac_dist * qp.delta).min())
