"""Deterministic serialization: a binary tensor container with a JSON
manifest, the run-config schema, calibration loading, and report writers.

Container layout (little-endian):

    bytes 0..3    magic "AFQT"
    bytes 4..7    format version, u32
    bytes 8..15   header length in bytes, u64
    header        JSON list of {name, dtype, shape, byte_offset, byte_len}
    payload       raw row-major buffers, offsets relative to payload start

Supported dtypes are f32, f64, u8 and u16.  Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .block import BlockParams, PlacementConfig
from .linalg import PrecisionScheme
from .optimize import FP_CHAINING, QUANT_CHAINING, OptimizerConfig
from .quant import PER_CHANNEL, PER_GROUP, PER_TENSOR, QuantConfig
from .transform import (
    AffineTransform,
    KIND_DIAGONAL,
    KIND_FULL,
    KIND_PER_HEAD,
    MaskSchedule,
)

MAGIC = b"AFQT"
FORMAT_VERSION = 1

_DTYPE_TO_TAG = {"<f4": "f32", "<f8": "f64", "|u1": "u8", "<u2": "u16"}
_TAG_TO_DTYPE = {"f32": "<f4", "f64": "<f8", "u8": "|u1", "u16": "<u2"}


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class OverlappingOffsetsError(ContainerError):
    pass


class DuplicateNameError(ContainerError):
    pass


def save_container(path, tensors) -> None:
    """Write named tensors in the container layout; names must be unique."""
    items = list(tensors.items()) if hasattr(tensors, "items") else list(tensors)
    seen = set()
    for name, _ in items:
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
    manifest = []
    payload = bytearray()
    for name, arr in items:
        arr = np.ascontiguousarray(arr)
        tag = None
        for code, t in _DTYPE_TO_TAG.items():
            if arr.dtype == np.dtype(code):
                tag = t
                break
        if tag is None:
            raise ContainerError(f"unsupported dtype {arr.dtype} for {name!r}")
        buf = arr.astype(np.dtype(_TAG_TO_DTYPE[tag]), copy=False).tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": tag,
                "shape": list(arr.shape),
                "byte_offset": len(payload),
                "byte_len": len(buf),
            }
        )
        payload.extend(buf)
    header = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def load_container(path) -> dict[str, np.ndarray]:
    """Read a container back with strict validation of the layout."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic in {path}")
    if len(raw) < 16:
        raise TruncatedPayloadError(f"truncated header in {path}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + header_len:
        raise TruncatedPayloadError(f"truncated header in {path}")
    try:
        manifest = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as ex:
        raise ContainerError(f"malformed header: {ex}") from ex
    if not isinstance(manifest, list):
        raise ContainerError("malformed header: manifest must be a list")
    payload = raw[16 + header_len :]
    out: dict[str, np.ndarray] = {}
    prev_end = 0
    for entry in manifest:
        if not isinstance(entry, dict) or set(entry) != {
            "name",
            "dtype",
            "shape",
            "byte_offset",
            "byte_len",
        }:
            raise ContainerError(f"malformed manifest entry: {entry!r}")
        name = entry["name"]
        if name in out:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        if entry["dtype"] not in _TAG_TO_DTYPE:
            raise ContainerError(f"unknown dtype {entry['dtype']!r} for {name!r}")
        dtype = np.dtype(_TAG_TO_DTYPE[entry["dtype"]])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        expect = count * dtype.itemsize
        if entry["byte_len"] != expect:
            raise ContainerError(
                f"byte_len {entry['byte_len']} does not match shape for {name!r}"
            )
        off = entry["byte_offset"]
        if off < prev_end:
            raise OverlappingOffsetsError(
                f"offsets overlap or are unsorted at {name!r}"
            )
        if off + entry["byte_len"] > len(payload):
            raise TruncatedPayloadError(f"payload truncated at {name!r}")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=off)
        out[name] = arr.reshape(shape).copy()
        prev_end = off + entry["byte_len"]
    return out


# -- run configuration -----------------------------------------------------------


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"config error at {path}: {message}")


def _check_keys(d, allowed, path):
    if not isinstance(d, dict):
        raise ConfigError(path, f"expected an object, got {type(d).__name__}")
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}", "unknown key")


_MISSING = object()


def _get(d, key, path, types, default=_MISSING, choices=None):
    if key not in d:
        if default is _MISSING:
            raise ConfigError(f"{path}.{key}", "missing required key")
        return default
    v = d[key]
    if types is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if not isinstance(v, types) or isinstance(v, bool) and types is not bool:
        raise ConfigError(f"{path}.{key}", f"expected {types}, got {type(v).__name__}")
    if choices is not None and v not in choices:
        raise ConfigError(f"{path}.{key}", f"must be one of {sorted(choices)}")
    return v


@dataclass(frozen=True)
class ModelSpec:
    hidden_size: int = 64
    n_heads: int = 4
    n_blocks: int = 1
    ffn_mult: int = 4
    seed: int = 42


@dataclass(frozen=True)
class CalibrationSource:
    kind: str  # "synthetic" | "file"
    seed: int = 0
    batches: int = 8
    tokens: int = 128
    path: str | None = None
    embedding_seed: int = 0
    vocab_size: int = 512


def _parse_quant(d, path) -> QuantConfig | None:
    if d is None:
        return None
    _check_keys(d, {"bits", "granularity", "group_size", "symmetric", "learnable_clip"}, path)
    cfg = dict(
        bits=_get(d, "bits", path, int),
        granularity=_get(
            d, "granularity", path, str, PER_CHANNEL,
            choices={PER_TENSOR, PER_CHANNEL, PER_GROUP},
        ),
        group_size=_get(d, "group_size", path, (int, type(None)), None),
        symmetric=_get(d, "symmetric", path, bool, False),
        learnable_clip=_get(d, "learnable_clip", path, bool, True),
    )
    try:
        return QuantConfig(**cfg)
    except ValueError as ex:
        raise ConfigError(path, str(ex)) from ex


@dataclass
class RunConfig:
    model: ModelSpec
    weight_quant: QuantConfig | None
    act_quant: QuantConfig | None
    pre_qkv: str
    pre_out_proj: str
    pre_fc1: str
    alpha: float | None  # None -> size policy
    optimizer: OptimizerConfig
    calibration: CalibrationSource

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys(
            d,
            {
                "model",
                "quantization",
                "placements",
                "mask",
                "optimizer",
                "precision",
                "calibration",
            },
            "$",
        )
        md = d.get("model", {})
        _check_keys(md, {"hidden_size", "n_heads", "n_blocks", "ffn_mult", "seed"}, "model")
        model = ModelSpec(
            hidden_size=_get(md, "hidden_size", "model", int, 64),
            n_heads=_get(md, "n_heads", "model", int, 4),
            n_blocks=_get(md, "n_blocks", "model", int, 1),
            ffn_mult=_get(md, "ffn_mult", "model", int, 4),
            seed=_get(md, "seed", "model", int, 42),
        )
        if model.hidden_size % model.n_heads:
            raise ConfigError("model.n_heads", "must divide hidden_size")

        qd = d.get("quantization", {})
        _check_keys(qd, {"weight", "activation"}, "quantization")
        # default run is 4-bit weight-only; an explicit null switches weight
        # quantization off
        if "weight" in qd:
            wq = _parse_quant(qd["weight"], "quantization.weight")
        else:
            wq = QuantConfig(bits=4, granularity=PER_CHANNEL, learnable_clip=True)
        aq = _parse_quant(qd.get("activation"), "quantization.activation")

        pd = d.get("placements", {})
        _check_keys(pd, {"pre_qkv", "pre_out_proj", "pre_fc1"}, "placements")
        pre_qkv = _get(
            pd, "pre_qkv", "placements", str, KIND_DIAGONAL,
            choices={KIND_FULL, KIND_DIAGONAL, "none"},
        )
        pre_out = _get(
            pd, "pre_out_proj", "placements", str, KIND_PER_HEAD,
            choices={KIND_PER_HEAD, KIND_DIAGONAL, "none"},
        )
        pre_fc1 = _get(
            pd, "pre_fc1", "placements", str, KIND_DIAGONAL,
            choices={KIND_FULL, KIND_DIAGONAL, "none"},
        )

        mk = d.get("mask", {})
        _check_keys(mk, {"alpha"}, "mask")
        alpha_raw = mk.get("alpha", "auto")
        if alpha_raw == "auto":
            alpha = None
        elif isinstance(alpha_raw, (int, float)) and not isinstance(alpha_raw, bool):
            alpha = float(alpha_raw)
            if alpha < 0:
                raise ConfigError("mask.alpha", "must be nonnegative")
        else:
            raise ConfigError("mask.alpha", 'expected a number or "auto"')

        od = d.get("optimizer", {})
        _check_keys(
            od,
            {
                "epochs",
                "last_block_epochs",
                "lr_affine",
                "lr_clip",
                "adam_beta1",
                "adam_beta2",
                "adam_eps",
                "seed",
                "next_block_input",
            },
            "optimizer",
        )
        precision = _get(
            d, "precision", "$", str, "double",
            choices={s.value for s in PrecisionScheme},
        )
        try:
            opt = OptimizerConfig(
                epochs=_get(od, "epochs", "optimizer", int, 20),
                last_block_epochs=_get(od, "last_block_epochs", "optimizer", int, 40),
                lr_affine=_get(od, "lr_affine", "optimizer", float, 1e-3),
                lr_clip=_get(od, "lr_clip", "optimizer", float, 1e-2),
                adam_beta1=_get(od, "adam_beta1", "optimizer", float, 0.9),
                adam_beta2=_get(od, "adam_beta2", "optimizer", float, 0.999),
                adam_eps=_get(od, "adam_eps", "optimizer", float, 1e-8),
                alpha=alpha,
                seed=_get(od, "seed", "optimizer", int, 0),
                next_block_input=_get(
                    od, "next_block_input", "optimizer", str, FP_CHAINING,
                    choices={FP_CHAINING, QUANT_CHAINING},
                ),
                scheme=PrecisionScheme(precision),
            )
        except ValueError as ex:
            raise ConfigError("optimizer", str(ex)) from ex

        cd = d.get("calibration", {"synthetic": {}})
        _check_keys(cd, {"synthetic", "file"}, "calibration")
        if ("synthetic" in cd) == ("file" in cd):
            raise ConfigError("calibration", 'exactly one of "synthetic" or "file"')
        if "synthetic" in cd:
            sd = cd["synthetic"]
            _check_keys(sd, {"seed", "batches", "tokens"}, "calibration.synthetic")
            calib = CalibrationSource(
                kind="synthetic",
                seed=_get(sd, "seed", "calibration.synthetic", int, 0),
                batches=_get(sd, "batches", "calibration.synthetic", int, 8),
                tokens=_get(sd, "tokens", "calibration.synthetic", int, 128),
            )
        else:
            fd = cd["file"]
            _check_keys(
                fd, {"path", "embedding_seed", "vocab_size"}, "calibration.file"
            )
            calib = CalibrationSource(
                kind="file",
                path=_get(fd, "path", "calibration.file", str),
                embedding_seed=_get(fd, "embedding_seed", "calibration.file", int, 0),
                vocab_size=_get(fd, "vocab_size", "calibration.file", int, 512),
            )
        if calib.batches < 1 or calib.tokens < 1:
            raise ConfigError("calibration", "batch/token counts must be positive")

        cfg = cls(
            model=model,
            weight_quant=wq,
            act_quant=aq,
            pre_qkv=pre_qkv,
            pre_out_proj=pre_out,
            pre_fc1=pre_fc1,
            alpha=alpha,
            optimizer=opt,
            calibration=calib,
        )
        try:
            cfg.placement_config()
        except ValueError as ex:
            raise ConfigError("placements", str(ex)) from ex
        return cfg

    def placement_config(self) -> PlacementConfig:
        return PlacementConfig(
            pre_qkv=self.pre_qkv,
            pre_out_proj=self.pre_out_proj,
            pre_fc1=self.pre_fc1,
            weight_quant=self.weight_quant,
            act_quant=self.act_quant,
        )

    def to_dict(self) -> dict:
        def quant_dict(q):
            if q is None:
                return None
            return {
                "bits": q.bits,
                "granularity": q.granularity,
                "group_size": q.group_size,
                "symmetric": q.symmetric,
                "learnable_clip": q.learnable_clip,
            }

        return {
            "model": {
                "hidden_size": self.model.hidden_size,
                "n_heads": self.model.n_heads,
                "n_blocks": self.model.n_blocks,
                "ffn_mult": self.model.ffn_mult,
                "seed": self.model.seed,
            },
            "quantization": {
                "weight": quant_dict(self.weight_quant),
                "activation": quant_dict(self.act_quant),
            },
            "placements": {
                "pre_qkv": self.pre_qkv,
                "pre_out_proj": self.pre_out_proj,
                "pre_fc1": self.pre_fc1,
            },
            "mask": {"alpha": "auto" if self.alpha is None else self.alpha},
            "optimizer": {
                "epochs": self.optimizer.epochs,
                "last_block_epochs": self.optimizer.last_block_epochs,
                "lr_affine": self.optimizer.lr_affine,
                "lr_clip": self.optimizer.lr_clip,
                "adam_beta1": self.optimizer.adam_beta1,
                "adam_beta2": self.optimizer.adam_beta2,
                "adam_eps": self.optimizer.adam_eps,
                "seed": self.optimizer.seed,
                "next_block_input": self.optimizer.next_block_input,
            },
            "precision": self.optimizer.scheme.value,
            "calibration": (
                {
                    "synthetic": {
                        "seed": self.calibration.seed,
                        "batches": self.calibration.batches,
                        "tokens": self.calibration.tokens,
                    }
                }
                if self.calibration.kind == "synthetic"
                else {
                    "file": {
                        "path": self.calibration.path,
                        "embedding_seed": self.calibration.embedding_seed,
                        "vocab_size": self.calibration.vocab_size,
                    }
                }
            ),
        }


def default_config_dict() -> dict:
    return RunConfig.from_dict({}).to_dict()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


# -- calibration --------------------------------------------------------------


def load_calibration(src: CalibrationSource, hidden_size: int) -> list[np.ndarray]:
    """Deterministic calibration batches of shape [tokens, hidden_size]."""
    if src.kind == "synthetic":
        rng = np.random.default_rng(src.seed)
        return [
            rng.standard_normal((src.tokens, hidden_size)) for _ in range(src.batches)
        ]
    ids = load_container(src.path)["token_ids"]
    if ids.ndim != 2:
        raise ValueError("token_ids must have shape [batches, tokens]")
    if ids.max(initial=0) >= src.vocab_size:
        raise ValueError(
            f"token id {int(ids.max())} out of vocab range {src.vocab_size}"
        )
    emb = np.random.default_rng(src.embedding_seed).standard_normal(
        (src.vocab_size, hidden_size)
    )
    return [emb[row.astype(np.int64)] for row in ids]


# -- model / transform containers -----------------------------------------------

_PARAM_FIELDS = (
    "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
    "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_out", "b_out",
    "w_fc1", "b_fc1", "w_fc2", "b_fc2",
)


def random_model(spec: ModelSpec) -> list[BlockParams]:
    rng = np.random.default_rng(spec.seed)
    return [
        BlockParams.random(rng, spec.hidden_size, spec.n_heads, spec.ffn_mult)
        for _ in range(spec.n_blocks)
    ]


def save_model(path, blocks: list[BlockParams]) -> None:
    tensors = {}
    for i, p in enumerate(blocks):
        for f in _PARAM_FIELDS:
            tensors[f"block{i}.{f}"] = np.asarray(getattr(p, f), dtype=np.float64)
        tensors[f"block{i}.n_heads"] = np.array([p.n_heads], dtype=np.uint16)
    save_container(path, tensors)


def load_model(path) -> list[BlockParams]:
    tensors = load_container(path)
    n_blocks = 1 + max(
        int(name.split(".")[0][5:]) for name in tensors if name.startswith("block")
    )
    blocks = []
    for i in range(n_blocks):
        kw = {f: tensors[f"block{i}.{f}"] for f in _PARAM_FIELDS}
        kw["n_heads"] = int(tensors[f"block{i}.n_heads"][0])
        blocks.append(BlockParams(**kw))
    return blocks


def save_transforms(path, results) -> None:
    """Persist learned transforms and clip scalars from per-block results."""
    tensors = {}
    for i, res in enumerate(results):
        for place, tr in res.transforms.items():
            base = f"block{i}.{place}"
            tensors[f"{base}.matrix"] = tr.matrix.astype(np.float64)
            if tr.shift is not None:
                tensors[f"{base}.shift"] = tr.shift.astype(np.float64)
            tensors[f"{base}.alpha"] = np.array([tr.schedule.alpha], dtype=np.float64)
        for key, val in res.clips.items():
            tensors[f"block{i}.{key}"] = np.asarray(val, dtype=np.float64)
    save_container(path, tensors)


def load_transforms(path, cfg: RunConfig) -> list[dict]:
    """Rebuild {transforms, clips} dicts per block from a transforms container."""
    tensors = load_container(path)
    placement = cfg.placement_config()
    epochs = cfg.optimizer.epochs
    out = []
    for i in range(cfg.model.n_blocks):
        prefix = f"block{i}."
        transforms: dict[str, AffineTransform] = {}
        clips: dict[str, np.ndarray] = {}
        t = (
            cfg.optimizer.last_block_epochs
            if i == cfg.model.n_blocks - 1 and cfg.model.n_blocks > 1
            else epochs
        )
        for place in placement.active_placements():
            key = f"{prefix}{place}.matrix"
            if key not in tensors:
                continue
            kind = placement.kind_for(place)
            head_dim = (
                cfg.model.hidden_size // cfg.model.n_heads
                if kind == KIND_PER_HEAD
                else None
            )
            band = head_dim if head_dim else cfg.model.hidden_size
            transforms[place] = AffineTransform(
                matrix=tensors[key],
                shift=tensors.get(f"{prefix}{place}.shift"),
                kind=kind,
                placement=place,
                schedule=MaskSchedule(
                    t, float(tensors[f"{prefix}{place}.alpha"][0]), band
                ),
                head_dim=head_dim,
            )
        for name, val in tensors.items():
            if name.startswith(f"{prefix}clip."):
                clips[name[len(prefix):]] = val
        out.append({"transforms": transforms, "clips": clips})
    return out


def save_fused(path, fused_blocks) -> None:
    tensors = {}
    for i, fb in enumerate(fused_blocks):
        p = fb.params
        for f in _PARAM_FIELDS:
            tensors[f"block{i}.{f}"] = np.asarray(getattr(p, f), dtype=np.float64)
        tensors[f"block{i}.n_heads"] = np.array([p.n_heads], dtype=np.uint16)
        if fb.weight_export:
            for site, qt in fb.weight_export.items():
                tensors[f"block{i}.codes.{site}"] = qt.codes
                tensors[f"block{i}.qparams.{site}.delta"] = np.asarray(
                    qt.qparams.delta, dtype=np.float64
                )
                tensors[f"block{i}.qparams.{site}.zp"] = np.asarray(
                    qt.qparams.zero_point, dtype=np.float64
                )
    save_container(path, tensors)


# -- report writers ------------------------------------------------------------


def report_to_dict(results, cfg_dict=None) -> dict:
    blocks = []
    for i, res in enumerate(results):
        rep = res.report
        blocks.append(
            {
                "block": i,
                "initial_loss": rep.initial_loss,
                "final_loss": rep.final_loss,
                "alphas": rep.alphas,
                "label": "diagonal-only" if rep.diagonal_only else "affine",
                "epochs": [
                    {
                        "epoch": r.epoch,
                        "loss": r.loss,
                        "transforms": {
                            place: {
                                "is_sdd": tr.is_sdd,
                                "alpha": tr.alpha,
                                "alpha_bound": _json_float(tr.alpha_bound_global),
                                "condition": tr.condition_estimate,
                            }
                            for place, tr in r.transforms.items()
                        },
                    }
                    for r in rep.records
                ],
            }
        )
    out = {"blocks": blocks}
    if cfg_dict is not None:
        out["config"] = cfg_dict
    return out


def _json_float(v: float):
    return None if not np.isfinite(v) else float(v)


REPORT_CSV_HEADER = (
    "block,epoch,loss,transform,is_sdd,alpha,alpha_bound,condition"
)


def report_csv_rows(results) -> list[str]:
    rows = []
    for i, res in enumerate(results):
        for r in res.report.records:
            for place, tr in r.transforms.items():
                bound = "" if not np.isfinite(tr.alpha_bound_global) else repr(
                    tr.alpha_bound_global
                )
                rows.append(
                    f"{i},{r.epoch},{r.loss!r},{place},{int(tr.is_sdd)},"
                    f"{tr.alpha!r},{bound},{tr.condition_estimate!r}"
                )
    return rows


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, header: str, rows: list[str]) -> None:
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")
