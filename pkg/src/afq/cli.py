"""Operator-facing command surface.

Exit codes: 0 success, 1 usage or validation error, 2 numerical divergence.
Progress and diagnostics go to stderr; machine-readable CSV/JSON goes to
stdout or the requested files so CI can parse command output directly.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checks
from .fusion import fuse_block, merge_error_experiment
from .linalg import PrecisionScheme
from .modelio import (
    ConfigError,
    ContainerError,
    RunConfig,
    default_config_dict,
    load_calibration,
    load_config,
    load_model,
    load_transforms,
    random_model,
    report_csv_rows,
    report_to_dict,
    REPORT_CSV_HEADER,
    save_fused,
    save_model,
    save_transforms,
    write_csv,
    write_json,
)
from .optimize import (
    OptimizationDiverged,
    alpha_sweep,
    optimize_model,
    pearson,
)
from .modelio import load_calibration as _load_calib
from .transform import MaskSchedule, dump_heatmap_csv, gradual_mask


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(message)


SWEEP_CSV_HEADER = "alpha,final_block_loss,ce_gap,diverged"


def _blocks_from_args(args, cfg: RunConfig):
    if bool(args.model) == bool(args.synthetic):
        raise CliUsageError("exactly one of --model or --synthetic is required")
    if args.synthetic:
        return random_model(cfg.model)
    blocks = load_model(args.model)
    if blocks[0].hidden_size != cfg.model.hidden_size or (
        blocks[0].n_heads != cfg.model.n_heads
    ):
        raise ConfigError("model", "model file does not match configured dimensions")
    return blocks


def _load_cfg(path) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    return load_config(path)


def cmd_quantize(args) -> int:
    cfg = _load_cfg(args.config)
    blocks = _blocks_from_args(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    calib = load_calibration(cfg.calibration, cfg.model.hidden_size)
    placement = cfg.placement_config()
    print(f"optimizing {len(blocks)} block(s) ...", file=sys.stderr)
    results = optimize_model(blocks, calib, placement, cfg.optimizer)
    fused = [
        fuse_block(blocks[i], r.transforms, r.clips, placement, cfg.optimizer.scheme)
        for i, r in enumerate(results)
    ]
    write_json(out / "report.json", report_to_dict(results, cfg.to_dict()))
    write_csv(out / "report.csv", REPORT_CSV_HEADER, report_csv_rows(results))
    write_json(out / "config.json", cfg.to_dict())
    save_model(out / "model.afqt", blocks)
    save_transforms(out / "transforms.afqt", results)
    save_fused(out / "fused.afqt", fused)
    for i, r in enumerate(results):
        print(
            f"block {i}: loss {r.report.initial_loss:.6g} -> "
            f"{r.report.final_loss:.6g}",
            file=sys.stderr,
        )
    return 0


def cmd_export(args) -> int:
    run = Path(args.run)
    cfg = load_config(run / "config.json")
    blocks = load_model(run / "model.afqt")
    saved = load_transforms(run / "transforms.afqt", cfg)
    placement = cfg.placement_config()
    if args.no_quant:
        from .block import PlacementConfig

        placement = PlacementConfig(
            pre_qkv=placement.pre_qkv,
            pre_out_proj=placement.pre_out_proj,
            pre_fc1=placement.pre_fc1,
            weight_quant=None,
            act_quant=None,
        )
    fused = [
        fuse_block(blocks[i], s["transforms"], s["clips"], placement,
                   cfg.optimizer.scheme)
        for i, s in enumerate(saved)
    ]
    out = Path(args.out) if args.out else run / "fused.afqt"
    save_fused(out, fused)
    print(f"wrote {out}", file=sys.stderr)
    return 0


def cmd_merge_error(args) -> int:
    if args.all_schemes:
        schemes = [PrecisionScheme.DOUBLE, PrecisionScheme.FLOAT_DOUBLE,
                   PrecisionScheme.FLOAT]
    elif args.scheme:
        schemes = [PrecisionScheme(args.scheme)]
    else:
        raise CliUsageError("one of --scheme or --all-schemes is required")
    try:
        results = [
            merge_error_experiment(
                args.dims, args.dims, args.tokens, args.trials, s, args.seed
            )
            for s in schemes
        ]
    except ValueError as ex:
        raise CliUsageError(str(ex)) from ex
    header = "scheme,dims,trials,mean_mse"
    rows = [
        f"{r.scheme.value},{r.dims},{r.trials},{r.mean_mse!r}" for r in results
    ]
    print(header)
    for row in rows:
        print(row)
    if args.out:
        write_csv(args.out, header, rows)
    return 0


def cmd_mask_dump(args) -> int:
    try:
        sched = MaskSchedule(
            args.epochs,
            args.alpha,
            args.head_dim if args.head_dim else args.hidden,
        )
        gm = gradual_mask(args.epoch, sched, args.hidden, args.head_dim)
    except ValueError as ex:
        raise CliUsageError(str(ex)) from ex
    lines = [",".join(repr(float(v)) for v in row) for row in gm]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    else:
        for line in lines:
            print(line)
    return 0


def cmd_check(args) -> int:
    passed, lines = checks.SUITES[args.suite]()
    for line in lines:
        print(line)
    print(f"suite {args.suite}: {'PASS' if passed else 'FAIL'}")
    return 0 if passed else 1


def cmd_report(args) -> int:
    if not args.run and not args.alpha_sweep:
        raise CliUsageError("one of --run or --alpha-sweep is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.alpha_sweep:
        try:
            alphas = [float(a) for a in args.alpha_sweep.split(",") if a.strip()]
        except ValueError as ex:
            raise CliUsageError(f"bad alpha list: {ex}") from ex
        if not alphas:
            raise CliUsageError("alpha list is empty")
        cfg = _load_cfg(args.config)
        blocks = random_model(cfg.model)
        calib = _load_calib(cfg.calibration, cfg.model.hidden_size)
        eval_src = cfg.calibration
        eval_batches = _held_out_batches(eval_src, cfg.model.hidden_size)
        rows, per_alpha = alpha_sweep(
            blocks, calib, cfg.placement_config(), cfg.optimizer, alphas,
            eval_batches,
        )
        csv_rows = [
            f"{r.alpha!r},{r.final_block_loss!r},{r.ce_gap!r},{int(r.diverged)}"
            for r in rows
        ]
        write_csv(out / "sweep.csv", SWEEP_CSV_HEADER, csv_rows)
        valid = [r for r in rows if not r.diverged]
        summary = {"rows": len(rows), "diverged": len(rows) - len(valid)}
        if len(valid) >= 3:
            summary["pearson_loss_ce_gap"] = pearson(
                [r.final_block_loss for r in valid], [r.ce_gap for r in valid]
            )
            print(f"pearson_loss_ce_gap={summary['pearson_loss_ce_gap']!r}")
        write_json(out / "sweep_summary.json", summary)
        for a, results in per_alpha.items():
            for i, res in enumerate(results):
                for place, tr in res.transforms.items():
                    base = out / f"heatmap_alpha{a!r}_block{i}_{place}.csv"
                    dump_heatmap_csv(base, tr.final_effective())
                    if args.normalized:
                        dump_heatmap_csv(
                            out / f"heatmap_alpha{a!r}_block{i}_{place}_norm.csv",
                            tr.final_effective(),
                            normalized=True,
                        )
    if args.run:
        run = Path(args.run)
        cfg = load_config(run / "config.json")
        saved = load_transforms(run / "transforms.afqt", cfg)
        for i, s in enumerate(saved):
            for place, tr in s["transforms"].items():
                dump_heatmap_csv(
                    out / f"heatmap_block{i}_{place}.csv", tr.final_effective()
                )
                if args.normalized:
                    dump_heatmap_csv(
                        out / f"heatmap_block{i}_{place}_norm.csv",
                        tr.final_effective(),
                        normalized=True,
                    )
    return 0


def _held_out_batches(src, hidden):
    from .modelio import CalibrationSource

    held = CalibrationSource(
        kind="synthetic",
        seed=src.seed + 9999,
        batches=2,
        tokens=src.tokens if src.kind == "synthetic" else 128,
    )
    return load_calibration(held, hidden)


def build_parser() -> _Parser:
    p = _Parser(prog="afq", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="optimize, fuse and export a model")
    q.add_argument("--config", help="run-config JSON path (default: built-in)")
    q.add_argument("--model", help="model container path")
    q.add_argument("--synthetic", action="store_true", help="build a seeded model")
    q.add_argument("--out", required=True, help="output directory")
    q.set_defaults(fn=cmd_quantize)

    e = sub.add_parser("export", help="fuse a finished run into a container")
    e.add_argument("--run", required=True, help="directory written by quantize")
    e.add_argument("--out", help="output container path")
    e.add_argument("--no-quant", action="store_true",
                   help="fuse without weight/activation quantization")
    e.set_defaults(fn=cmd_export)

    m = sub.add_parser("merge-error", help="precision-scheme merge-error table")
    m.add_argument("--dims", type=int, required=True)
    m.add_argument("--tokens", type=int, default=256)
    m.add_argument("--trials", type=int, default=50)
    m.add_argument("--scheme", choices=[s.value for s in PrecisionScheme])
    m.add_argument("--all-schemes", action="store_true")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", help="also write the CSV here")
    m.set_defaults(fn=cmd_merge_error)

    d = sub.add_parser("mask-dump", help="dump a gradual mask as CSV")
    d.add_argument("--hidden", type=int, required=True)
    d.add_argument("--epochs", type=int, required=True)
    d.add_argument("--epoch", type=int, required=True)
    d.add_argument("--alpha", type=float, required=True)
    d.add_argument("--head-dim", type=int, default=None)
    d.add_argument("--out")
    d.set_defaults(fn=cmd_mask_dump)

    c = sub.add_parser("check", help="run a property suite")
    c.add_argument("--suite", required=True, choices=sorted(checks.SUITES))
    c.set_defaults(fn=cmd_check)

    r = sub.add_parser("report", help="alpha sweep tables and transform heatmaps")
    r.add_argument("--run", help="directory written by quantize")
    r.add_argument("--alpha-sweep", help="comma-separated stability factors")
    r.add_argument("--config", help="run-config JSON path (default: built-in)")
    r.add_argument("--out", default=".", help="output directory")
    r.add_argument("--normalized", action="store_true",
                   help="also write 0..1-normalized heatmap copies")
    r.set_defaults(fn=cmd_report)

    g = sub.add_parser("default-config", help="print the built-in run config")
    g.set_defaults(fn=lambda args: print(json.dumps(default_config_dict(),
                                                    indent=2, sort_keys=True)) or 0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliUsageError as ex:
        print(f"usage error: {ex}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except CliUsageError as ex:
        print(f"usage error: {ex}", file=sys.stderr)
        return 1
    except OptimizationDiverged as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 2
    except (ConfigError, ContainerError, FileNotFoundError, ValueError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
