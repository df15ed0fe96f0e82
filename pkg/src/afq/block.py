"""A desk-scale pre-LayerNorm transformer block (multi-head causal attention,
two-layer ReLU MLP) runnable in full precision or with affine transforms and
fake quantization applied at three placements: the qkv input, the out-proj
input, and the fc1 input.

The transformed forward rewrites each configured placement as
(X - shift) @ inv(A * mask) feeding weights fake_quant(A * mask @ W) with
bias b + shift @ W, which leaves the block output unchanged when
quantization is off.  Everything is built on the autodiff tape so the block
loss is differentiable in the transform matrices, shifts and clip scalars.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import PrecisionScheme
from .quant import CLIP_RAW_INIT, QuantConfig, PER_TENSOR
from .tape import Graph, Node
from .transform import (
    AffineTransform,
    KIND_DIAGONAL,
    KIND_FULL,
    KIND_PER_HEAD,
)

PRE_QKV = "qkv"
PRE_OUT = "out_proj"
PRE_FC1 = "fc1"
PLACEMENTS = (PRE_QKV, PRE_OUT, PRE_FC1)

WEIGHT_SITES = ("w_q", "w_k", "w_v", "w_out", "w_fc1", "w_fc2")
ACT_SITES = ("act_qkv", "act_out_proj", "act_fc1", "act_fc2")

LN_EPS = 1e-5
NEG_INF = -1e30


@dataclass
class BlockParams:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    w_fc1: np.ndarray
    b_fc1: np.ndarray
    w_fc2: np.ndarray
    b_fc2: np.ndarray
    n_heads: int

    def __post_init__(self):
        if self.hidden_size % self.n_heads:
            raise ValueError(
                f"n_heads {self.n_heads} must divide hidden size {self.hidden_size}"
            )

    @property
    def hidden_size(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    @property
    def ffn_size(self) -> int:
        return self.w_fc1.shape[1]

    def copy(self) -> "BlockParams":
        kw = {
            k: (v.copy() if isinstance(v, np.ndarray) else v)
            for k, v in self.__dict__.items()
        }
        return BlockParams(**kw)

    def weight(self, site: str) -> np.ndarray:
        return getattr(self, site)

    @classmethod
    def random(
        cls, rng: np.random.Generator, hidden_size: int, n_heads: int, ffn_mult: int = 4
    ) -> "BlockParams":
        d = hidden_size
        f = ffn_mult * d
        s = 1.0 / np.sqrt(d)
        return cls(
            ln1_gamma=1.0 + 0.2 * rng.standard_normal(d),
            ln1_beta=0.1 * rng.standard_normal(d),
            ln2_gamma=1.0 + 0.2 * rng.standard_normal(d),
            ln2_beta=0.1 * rng.standard_normal(d),
            w_q=s * rng.standard_normal((d, d)),
            b_q=0.02 * rng.standard_normal(d),
            w_k=s * rng.standard_normal((d, d)),
            b_k=0.02 * rng.standard_normal(d),
            w_v=s * rng.standard_normal((d, d)),
            b_v=0.02 * rng.standard_normal(d),
            w_out=s * rng.standard_normal((d, d)),
            b_out=0.02 * rng.standard_normal(d),
            w_fc1=s * rng.standard_normal((d, f)),
            b_fc1=0.02 * rng.standard_normal(f),
            w_fc2=(1.0 / np.sqrt(f)) * rng.standard_normal((f, d)),
            b_fc2=0.02 * rng.standard_normal(d),
            n_heads=n_heads,
        )


_QKV_KINDS = (KIND_FULL, KIND_DIAGONAL, "none")
_OUT_KINDS = (KIND_PER_HEAD, KIND_DIAGONAL, "none")


@dataclass(frozen=True)
class PlacementConfig:
    """Which transform kind sits at each placement, plus quantization configs.

    Weight-activation mode (act_quant set) forces the LayerNorm-adjacent
    placements to diagonal-only so the transform can later fold into the
    LayerNorm parameters.
    """

    pre_qkv: str = KIND_DIAGONAL
    pre_out_proj: str = KIND_PER_HEAD
    pre_fc1: str = KIND_DIAGONAL
    weight_quant: QuantConfig | None = None
    act_quant: QuantConfig | None = None

    def __post_init__(self):
        if self.pre_qkv not in _QKV_KINDS:
            raise ValueError(f"pre_qkv must be one of {_QKV_KINDS}")
        if self.pre_out_proj not in _OUT_KINDS:
            raise ValueError(f"pre_out_proj must be one of {_OUT_KINDS}")
        if self.pre_fc1 not in _QKV_KINDS:
            raise ValueError(f"pre_fc1 must be one of {_QKV_KINDS}")
        if self.act_quant is not None:
            for name, kind in (("pre_qkv", self.pre_qkv), ("pre_fc1", self.pre_fc1)):
                if kind == KIND_FULL:
                    raise ValueError(
                        f"weight-activation mode requires {name} to be "
                        f"diagonal-only or none, got {kind!r}"
                    )

    def kind_for(self, placement: str) -> str:
        return {
            PRE_QKV: self.pre_qkv,
            PRE_OUT: self.pre_out_proj,
            PRE_FC1: self.pre_fc1,
        }[placement]

    def active_placements(self) -> tuple[str, ...]:
        return tuple(p for p in PLACEMENTS if self.kind_for(p) != "none")


@dataclass
class BlockMode:
    """Either the plain full-precision forward or the transformed-quantized
    forward with a concrete set of transforms, clip scalars and masks."""

    placement: PlacementConfig | None = None
    transforms: dict[str, AffineTransform] | None = None
    clips: dict[str, np.ndarray] | None = None
    epoch: int | None = None  # None -> each transform's final mask
    scheme: PrecisionScheme = PrecisionScheme.DOUBLE

    @classmethod
    def full_precision(cls) -> "BlockMode":
        return cls()

    @classmethod
    def transformed(
        cls,
        placement: PlacementConfig,
        transforms: dict[str, AffineTransform],
        clips: dict[str, np.ndarray] | None = None,
        epoch: int | None = None,
        scheme: PrecisionScheme = PrecisionScheme.DOUBLE,
    ) -> "BlockMode":
        return cls(placement, transforms, clips or {}, epoch, scheme)

    @property
    def is_full_precision(self) -> bool:
        return self.placement is None


def causal_mask(tokens: int) -> np.ndarray:
    m = np.zeros((tokens, tokens))
    m[np.triu_indices(tokens, k=1)] = NEG_INF
    return m


def clip_group_count(shape: tuple[int, ...], cfg: QuantConfig) -> int:
    if cfg.granularity == PER_TENSOR:
        return 1
    din, dout = shape
    if cfg.granularity == "per-channel":
        return dout
    return (din // cfg.group_size) * dout


def init_clips(params: BlockParams, placement: PlacementConfig) -> dict[str, np.ndarray]:
    """Raw clip scalars per quantized tensor, starting at ~full range."""
    clips: dict[str, np.ndarray] = {}
    wq = placement.weight_quant
    if wq is not None and wq.learnable_clip:
        for site in WEIGHT_SITES:
            n = clip_group_count(params.weight(site).shape, wq)
            clips[f"clip.{site}.hi"] = np.full(n, CLIP_RAW_INIT)
            if not wq.symmetric:
                clips[f"clip.{site}.lo"] = np.full(n, CLIP_RAW_INIT)
    aq = placement.act_quant
    if aq is not None and aq.learnable_clip:
        for site in ACT_SITES:
            clips[f"clip.{site}.hi"] = np.full(1, CLIP_RAW_INIT)
            if not aq.symmetric:
                clips[f"clip.{site}.lo"] = np.full(1, CLIP_RAW_INIT)
    return clips


class BlockGraph:
    """Tape graph for one block forward; taps expose placement inputs."""

    def __init__(
        self,
        params: BlockParams,
        tokens: int,
        mode: BlockMode,
        masks: dict[str, np.ndarray] | None = None,
        segments: int = 1,
    ):
        """segments > 1 treats the input rows as that many stacked
        independent sequences: attention is computed per segment, so one
        forward over concatenated calibration batches equals the per-batch
        forwards."""
        self.params = params
        self.mode = mode
        self.g = Graph(mode.scheme)
        self.taps: dict[str, Node] = {}
        self.eff_nodes: dict[str, Node] = {}  # A * mask per placement
        self.masks = masks or {}
        self.segments = segments
        if tokens % segments:
            raise ValueError(f"{segments} segments do not divide {tokens} tokens")
        if not mode.is_full_precision and masks is None:
            self.masks = {
                name: tr.mask(mode.epoch or tr.schedule.target_epochs)
                for name, tr in mode.transforms.items()
            }
        self.out = self._build(tokens)

    # -- helpers -------------------------------------------------------------

    def _const(self, value):
        return self.g.const(np.asarray(value, dtype=self.mode.scheme.model_dtype))

    def _row(self, vec):
        return self._const(np.asarray(vec).reshape(1, -1))

    def _clip_nodes(self, site: str, cfg: QuantConfig):
        clips = self.mode.clips or {}
        lo = hi = None
        if cfg.learnable_clip:
            if f"clip.{site}.hi" in clips:
                hi = self.g.leaf(f"clip.{site}.hi")
            if f"clip.{site}.lo" in clips:
                lo = self.g.leaf(f"clip.{site}.lo")
        return lo, hi

    def _quant_weight(self, site: str, node: Node) -> Node:
        cfg = None if self.mode.placement is None else self.mode.placement.weight_quant
        if cfg is None:
            return node
        lo, hi = self._clip_nodes(site, cfg)
        return self.g.fake_quant_dynamic(node, cfg, lo, hi)

    def _quant_act(self, site: str, node: Node) -> Node:
        cfg = None if self.mode.placement is None else self.mode.placement.act_quant
        if cfg is None:
            return node
        lo, hi = self._clip_nodes(site, cfg)
        return self.g.fake_quant_dynamic(node, cfg, lo, hi)

    def _placement(self, placement: str, x: Node, weights: dict[str, np.ndarray]):
        """Apply the transform at one placement.

        Returns the (possibly transformed) activation node plus effective
        weight/bias nodes for each consuming linear layer.
        """
        g = self.g
        mode = self.mode
        active = (
            not mode.is_full_precision
            and mode.transforms is not None
            and placement in mode.transforms
        )
        w_nodes = {}
        b_nodes = {}
        if not active:
            for site, w in weights.items():
                w_nodes[site] = self._quant_weight(site, self._const(w))
                b_nodes[site] = self._row(getattr(self.params, site.replace("w_", "b_")))
            return x, w_nodes, b_nodes
        tr = mode.transforms[placement]
        a = g.leaf(f"a.{placement}")
        gm = g.const(self.masks[placement].astype(mode.scheme.transform_dtype))
        a_eff = g.mul(a, gm)
        self.eff_nodes[placement] = a_eff
        inv = g.inverse(a_eff, tag=placement)
        if tr.shift is not None:
            delta = g.leaf(f"delta.{placement}")
            x = g.sub(x, delta)
        x = g.matmul(x, inv, transform_side=True)
        for site, w in weights.items():
            w_t = g.matmul(a_eff, self._const(w), transform_side=True)
            w_nodes[site] = self._quant_weight(site, w_t)
            bias = self._row(getattr(self.params, site.replace("w_", "b_")))
            if tr.shift is not None:
                bias = g.add(bias, g.matmul(delta, self._const(w)))
            b_nodes[site] = bias
        return x, w_nodes, b_nodes

    # -- the block -----------------------------------------------------------

    def _build(self, tokens: int) -> Node:
        g = self.g
        p = self.params
        d = p.hidden_size
        hd = p.head_dim
        x = g.leaf("x", trainable=False)
        self.taps["block_input"] = x

        h1 = g.layernorm(x, self._const(p.ln1_gamma), self._const(p.ln1_beta), LN_EPS)
        self.taps[PRE_QKV] = h1
        h1t, w_nodes, b_nodes = self._placement(
            PRE_QKV, h1, {"w_q": p.w_q, "w_k": p.w_k, "w_v": p.w_v}
        )
        h1t = self._quant_act("act_qkv", h1t)
        q = g.add(g.matmul(h1t, w_nodes["w_q"]), b_nodes["w_q"])
        k = g.add(g.matmul(h1t, w_nodes["w_k"]), b_nodes["w_k"])
        v = g.add(g.matmul(h1t, w_nodes["w_v"]), b_nodes["w_v"])

        cm = causal_mask(tokens // self.segments)
        heads = []
        for h in range(p.n_heads):
            s, e = h * hd, (h + 1) * hd
            qh = g.slice_cols(q, s, e)
            kh = g.slice_cols(k, s, e)
            vh = g.slice_cols(v, s, e)
            if self.segments > 1:
                qh = g.seg_split(qh, self.segments)
                kh = g.seg_split(kh, self.segments)
                vh = g.seg_split(vh, self.segments)
            scores = g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / np.sqrt(hd))
            probs = g.softmax(scores, mask=cm)
            oh = g.matmul(probs, vh)
            heads.append(g.seg_merge(oh) if self.segments > 1 else oh)
        attn = g.concat_cols(heads)
        self.taps[PRE_OUT] = attn

        attn_t, w_nodes, b_nodes = self._placement(PRE_OUT, attn, {"w_out": p.w_out})
        attn_t = self._quant_act("act_out_proj", attn_t)
        ao = g.add(g.matmul(attn_t, w_nodes["w_out"]), b_nodes["w_out"])
        x2 = g.add(x, ao)

        h2 = g.layernorm(x2, self._const(p.ln2_gamma), self._const(p.ln2_beta), LN_EPS)
        self.taps[PRE_FC1] = h2
        h2t, w_nodes, b_nodes = self._placement(PRE_FC1, h2, {"w_fc1": p.w_fc1})
        h2t = self._quant_act("act_fc1", h2t)
        m1 = g.relu(g.add(g.matmul(h2t, w_nodes["w_fc1"]), b_nodes["w_fc1"]))
        self.taps["fc2"] = m1
        m1q = self._quant_act("act_fc2", m1)
        w_fc2 = self._quant_weight("w_fc2", self._const(p.w_fc2))
        m2 = g.add(g.matmul(m1q, w_fc2), self._row(p.b_fc2))
        return g.add(x2, m2)

    def bindings(self, x: np.ndarray) -> dict[str, np.ndarray]:
        mode = self.mode
        b = {"x": np.asarray(x, dtype=mode.scheme.model_dtype)}
        if mode.is_full_precision:
            return b
        for name, tr in mode.transforms.items():
            b[f"a.{name}"] = tr.matrix.astype(mode.scheme.transform_dtype)
            if tr.shift is not None:
                b[f"delta.{name}"] = tr.shift.reshape(1, -1).astype(
                    mode.scheme.model_dtype
                )
        for key, val in (mode.clips or {}).items():
            b[key] = np.asarray(val, dtype=np.float64)
        return b

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.g.forward(self.bindings(x), self.out)


def block_forward(params: BlockParams, x: np.ndarray, mode: BlockMode) -> np.ndarray:
    return BlockGraph(params, x.shape[0], mode).forward(x)


def block_loss(
    params: BlockParams, batches: list[np.ndarray], mode: BlockMode
) -> float:
    """Mean over calibration batches of the squared Frobenius norm of the
    difference between the full-precision and the given-mode forwards."""
    fp = BlockMode.full_precision()
    total = 0.0
    for x in batches:
        ref = block_forward(params, x, fp)
        out = block_forward(params, x, mode)
        diff = ref.astype(np.float64) - out.astype(np.float64)
        total += float(np.sum(diff * diff))
    return total / len(batches)


@dataclass
class PlacementStats:
    act_max: np.ndarray
    act_min: np.ndarray
    act_absmax: np.ndarray
    w_absmax: np.ndarray | None = None


def collect_stats(
    params: BlockParams, calib: list[np.ndarray]
) -> dict[str, PlacementStats]:
    """Channel-wise activation ranges at each placement input (full-precision
    forward) plus per-input-row weight magnitudes of the consuming layers."""
    if not calib:
        raise ValueError("calibration set is empty")
    graph = BlockGraph(params, calib[0].shape[0], BlockMode.full_precision())
    acc: dict[str, list[np.ndarray]] = {}
    for x in calib:
        graph.forward(x)
        for name in ("block_input", PRE_QKV, PRE_OUT, PRE_FC1):
            v = np.asarray(graph.taps[name].value, dtype=np.float64)
            entry = acc.setdefault(name, [v.max(axis=0), v.min(axis=0)])
            entry[0] = np.maximum(entry[0], v.max(axis=0))
            entry[1] = np.minimum(entry[1], v.min(axis=0))
    w_absmax = {
        PRE_QKV: np.max(
            [np.abs(params.w_q), np.abs(params.w_k), np.abs(params.w_v)], axis=(0, 2)
        ),
        PRE_OUT: np.abs(params.w_out).max(axis=1),
        PRE_FC1: np.abs(params.w_fc1).max(axis=1),
    }
    out = {}
    for name, (hi, lo) in acc.items():
        out[name] = PlacementStats(
            act_max=hi,
            act_min=lo,
            act_absmax=np.maximum(np.abs(hi), np.abs(lo)),
            w_absmax=w_absmax.get(name),
        )
    return out
