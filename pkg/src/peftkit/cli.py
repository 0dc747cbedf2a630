"""Command-line front end.

Subcommands: run, matrix, count-params, quant-inspect, synth, report.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error,
1 anything else.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import SyntheticSpec, export_dataset, SYNTH_CLASS_NAMES, synthesize_dataset
from .errors import (CheckpointError, ConfigError, ContractError, DataError,
                     NumericError, ShapeError)
from .experiments import (ExperimentConfig, RunResult, parse_config, parse_matrix,
                          results_csv, results_markdown, run_experiment, run_matrix)
from .nn import ArchSpec, HeadSpec, arch_preset, head_param_count
from .peft import PeftConfig, peft_accounting
from .checkpoint import load_checkpoint
from .quantize import (DEFAULT_BLOCK_SIZE, DEFAULT_DQ_GROUP_SIZE, dequantize,
                       quantize_linear, roundtrip_error_bound)

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    result = run_experiment(cfg)
    print(f"{result.name}: val={result.best_val_accuracy:.4f} "
          f"test={result.test_accuracy:.4f} f1={result.test_weighted_f1:.4f} "
          f"gap={result.val_test_gap_pp:.2f}pp "
          f"trainable={result.trainable_params} "
          f"({result.trainable_fraction * 100:.2f}%)")
    print(f"artifacts: {Path(result.report_path).parent}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    configs = parse_matrix(args.config)
    if args.seed is not None:
        configs = [replace(c, train=replace(c.train, seed=args.seed)) for c in configs]
    out = Path(args.out or "matrix_runs")
    results = run_matrix(configs, out)
    if args.format == "csv":
        print(results_csv(results), end="")
    elif args.format == "json":
        from dataclasses import asdict
        print(json.dumps([asdict(r) for r in results], sort_keys=True, indent=2))
    else:
        print(results_markdown(results), end="")
    failures = [r for r in results if r.failed]
    if failures:
        print(f"{len(failures)} run(s) failed", file=sys.stderr)
    return EXIT_OK


def _parse_accounting_config(path: str) -> tuple[ArchSpec, PeftConfig | None, HeadSpec | None]:
    cp = configparser.ConfigParser()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    cp.read_string(p.read_text())
    if "arch" not in cp:
        raise ConfigError("count-params needs an [arch] section")
    sec = cp["arch"]
    if "preset" in sec:
        arch = arch_preset(sec["preset"])
    else:
        arch = ArchSpec(kind=sec.get("kind", "vit"), width=sec.getint("width"),
                        depth=sec.getint("depth"), heads=sec.getint("heads", fallback=1),
                        mlp_hidden=sec.getint("mlp_hidden", fallback=0),
                        patch_size=sec.getint("patch_size", fallback=16),
                        image_size=sec.getint("image_size", fallback=224),
                        num_classes=sec.getint("num_classes", fallback=9))
    peft = None
    if "peft" in cp:
        ps = cp["peft"]
        peft = PeftConfig(ps["method"], ps["targets"], ps.getint("rank"),
                          ps.getfloat("alpha"), ps.getfloat("dropout", fallback=0.05))
    head = None
    if "head" in cp:
        hs = cp["head"]
        head = HeadSpec(hs.getint("in_dim", fallback=arch.feature_dim),
                        hs.getint("hidden1"), hs.getint("hidden2"),
                        hs.getint("num_classes", fallback=arch.num_classes),
                        hs.getfloat("dropout1", fallback=0.30),
                        hs.getfloat("dropout2", fallback=0.15))
    return arch, peft, head


def cmd_count_params(args) -> int:
    arch, peft, head = _parse_accounting_config(args.config)
    acc = peft_accounting(arch, peft, head)
    payload = {
        "backbone_params": acc.backbone_params,
        "head_params": acc.head_params,
        "adapter_params": acc.adapter_params,
        "magnitude_params": acc.magnitude_params,
        "trainable_params": acc.trainable_params,
        "adapter_fraction": acc.adapter_fraction,
        "trainable_fraction": acc.trainable_fraction,
        "per_target": acc.per_target,
    }
    if args.format == "json":
        print(json.dumps(payload, sort_keys=True, indent=2))
        return EXIT_OK
    sep = "," if args.format == "csv" else " | "
    print(sep.join(["quantity", "value"]))
    if args.format == "md":
        print("|---|---|")
    for key in ("backbone_params", "head_params", "adapter_params",
                "magnitude_params", "trainable_params"):
        print(sep.join([key, str(payload[key])]))
    print(sep.join(["adapter_fraction", f"{acc.adapter_fraction * 100:.4f}%"]))
    print(sep.join(["trainable_fraction", f"{acc.trainable_fraction * 100:.4f}%"]))
    for name, n in acc.per_target.items():
        print(sep.join([f"target.{name}", str(n)]))
    return EXIT_OK


def cmd_quant_inspect(args) -> int:
    tensors, manifest, _ = load_checkpoint(args.checkpoint)
    b1 = args.block_size
    b2 = args.dq_group_size
    rows = []
    for name in sorted(tensors):
        arr = tensors[name]
        if arr.ndim != 2:
            continue
        q = quantize_linear(arr, block_size=b1, dq_group_size=b2)
        recon = dequantize(q).astype(np.float64)
        err = np.abs(recon - arr.astype(np.float64))
        flat = err.reshape(-1)
        pad = (-flat.size) % b1
        per_block = np.pad(flat, (0, pad)).reshape(-1, b1).max(axis=1)
        bound = roundtrip_error_bound(q)
        rows.append({"layer": name, "shape": list(arr.shape),
                     "max_abs_error": float(err.max()),
                     "mean_abs_error": float(err.mean()),
                     "within_bound": bool(np.all(per_block <= bound + 1e-15))})
    payload = {"block_size": b1, "dq_group_size": b2, "layers": rows}
    if args.format == "json":
        print(json.dumps(payload, sort_keys=True, indent=2))
        return EXIT_OK
    sep = "," if args.format == "csv" else " | "
    print(f"block_size={b1} dq_group_size={b2}")
    print(sep.join(["layer", "shape", "max_abs_error", "mean_abs_error", "within_bound"]))
    if args.format == "md":
        print("|---|---|---|---|---|")
    for r in rows:
        print(sep.join([r["layer"], "x".join(map(str, r["shape"])),
                        f"{r['max_abs_error']:.3e}", f"{r['mean_abs_error']:.3e}",
                        str(r["within_bound"])]))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticSpec()
    seed = args.seed if args.seed is not None else 42
    if args.config:
        cp = configparser.ConfigParser()
        p = Path(args.config)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        cp.read_string(p.read_text())
        sec = cp["synthetic"] if "synthetic" in cp else cp["DEFAULT"]
        spec = SyntheticSpec(
            image_size=sec.getint("image_size", fallback=32),
            train_per_class=sec.getint("train_per_class", fallback=24),
            val_per_class=sec.getint("val_per_class", fallback=6),
            test_total=sec.getint("test_total", fallback=10800))
        if args.seed is None and "seed" in sec:
            seed = sec.getint("seed")
    out = Path(args.out or "synth_data")
    data = synthesize_dataset(spec, seed)
    counts = {}
    for split, samples in (("train", data.train), ("val", data.val), ("test", data.test)):
        counts[split] = export_dataset(samples, out / split, SYNTH_CLASS_NAMES,
                                       fmt=args.format)
    print(json.dumps({"out": str(out), "seed": seed, "counts": counts}, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out or ".")
    reports = sorted(out.glob("**/report.json"))
    if not reports:
        raise DataError(f"no report.json files under {out}")
    results = []
    for path in reports:
        d = json.loads(path.read_text())
        results.append(RunResult(
            name=d["name"], paradigm=d["paradigm"], method=d.get("method") or "-",
            targets=d.get("targets") or "-", rank=d.get("rank", 0),
            trainable_params=d["trainable_params"],
            trainable_fraction=d["trainable_fraction"],
            best_val_accuracy=d["best_val_accuracy"], best_epoch=d["best_epoch"],
            test_accuracy=d["test_accuracy"], test_weighted_f1=d["test_weighted_f1"],
            val_test_gap_pp=d["val_test_gap_pp"], wall_seconds=0.0,
            per_source=d["metrics"].get("sources", {})))
    if args.format == "csv":
        print(results_csv(results), end="")
    elif args.format == "json":
        from dataclasses import asdict
        print(json.dumps([asdict(r) for r in results], sort_keys=True, indent=2))
    else:
        print(results_markdown(results), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="peftkit",
                                 description="PEFT toolkit experiment runner")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True, formats=("md", "csv", "json")):
        p.add_argument("--config", required=config_required, help="INI config path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--format", choices=list(formats), default=formats[0])

    p = sub.add_parser("run", help="run one experiment end to end")
    common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("matrix", help="run an experiment matrix")
    common(p)
    p.set_defaults(fn=cmd_matrix)

    p = sub.add_parser("count-params", help="closed-form adapter accounting")
    common(p)
    p.set_defaults(fn=cmd_count_params)

    p = sub.add_parser("quant-inspect", help="quantization error statistics")
    p.add_argument("checkpoint", help="dense model checkpoint path")
    p.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    p.add_argument("--dq-group-size", type=int, default=DEFAULT_DQ_GROUP_SIZE)
    p.add_argument("--format", choices=["md", "csv", "json"], default="md")
    p.set_defaults(fn=cmd_quant_inspect)

    p = sub.add_parser("synth", help="export a synthetic dataset to disk")
    common(p, config_required=False, formats=("png", "ppm"))
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("report", help="re-render tables from stored run reports")
    common(p, config_required=False)
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
