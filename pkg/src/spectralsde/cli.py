"""Command-line harness: dataset generation, training, evaluation,
prediction dumps, spectrum inspection and the naive baseline.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
Every run writes a manifest (config hash, dataset hashes, seed, versions)
into the output directory; re-running any pipeline with identical seeds
reproduces every output byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .data import load_dataset, save_dataset
from .datagen import BenchmarkSpec, generate_benchmark
from .errors import ConfigError, DataError, NumericalError
from .io_utils import dump_json, sha256_file, sha256_obj
from .metrics import (
    eigenvalue_summary,
    evaluation_report,
    model_predictions,
    model_predictions_holdout,
    naive_predictions,
    prior_only_predictions,
    records_from_json,
    records_to_json,
    report_csv_rows,
    write_csv,
)
from .model import (
    ModelConfig,
    PiecewiseSdeModel,
    TrainConfig,
    checkpoint_from_json,
    checkpoint_to_json,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_json_file(path, kind: str):
    err = ConfigError if kind == "config" else DataError
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise err(f"{kind} file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise err(f"{kind} file {path} is not valid JSON: {exc}") from exc


def _ensure_out_dir(args) -> str:
    out = args.out_dir or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out_dir, command, seed, config_obj=None, data_paths=(),
                    extra=None):
    manifest = {
        "command": command,
        "seed": seed,
        "config_hash": sha256_obj(config_obj) if config_obj is not None else None,
        "dataset_hashes": {os.path.basename(p): sha256_file(p)
                           for p in data_paths},
        "versions": {
            "spectralsde": __version__,
            "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
    }
    if extra:
        manifest.update(extra)
    dump_json(manifest, os.path.join(out_dir, "manifest.json"))


def _parse_protocol(text: str):
    if text == "standard":
        return "standard", None
    if text.startswith("holdout:"):
        try:
            return "holdout", float(text.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad holdout split time in protocol {text!r}") from exc
    raise ConfigError(f"unknown protocol {text!r} (use standard | holdout:<t>)")


def _load_checkpoint(path):
    obj = _load_json_file(path, "config")
    return checkpoint_from_json(obj)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if not args.config:
        raise ConfigError("generate requires --config pointing at a benchmark spec")
    spec_obj = _load_json_file(args.config, "config")
    if args.seed is not None:
        spec_obj["seed"] = args.seed
    spec = BenchmarkSpec.from_dict(spec_obj)
    out_dir = _ensure_out_dir(args)
    splits = generate_benchmark(spec)
    paths = []
    for name, trajs in splits.items():
        path = os.path.join(out_dir, f"{name}.jsonl")
        save_dataset(trajs, path)
        paths.append(path)
        print(f"wrote {len(trajs)} trajectories to {path}", file=sys.stderr)
    _write_manifest(out_dir, "generate", spec.seed, spec.to_dict(), paths)
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.config:
        raise ConfigError("train requires --config with 'model' and 'train' sections")
    cfg = _load_json_file(args.config, "config")
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if "model" not in cfg:
        raise ConfigError("config is missing the 'model' section")
    model_cfg = ModelConfig.from_dict(cfg["model"])
    train_cfg = TrainConfig.from_dict(cfg.get("train", {}))
    if args.seed is not None:
        train_cfg.seed = args.seed
    train_trajs = load_dataset(args.data)
    val_trajs = load_dataset(args.val) if args.val else train_trajs[-max(1, len(train_trajs) // 5):]
    if not train_trajs:
        raise DataError(f"training dataset {args.data} is empty")
    out_dir = _ensure_out_dir(args)

    if args.resume:
        model, adam, _ = _load_checkpoint(args.resume)
        if model.config.to_dict() != model_cfg.to_dict():
            raise ConfigError("resume checkpoint config does not match --config")
        if adam is None:
            adam = _fresh_adam(model, train_cfg)
    else:
        model = PiecewiseSdeModel(model_cfg, seed=train_cfg.seed)
        adam = _fresh_adam(model, train_cfg)
    start_step = adam.step

    def log_fn(entry):
        print(
            f"epoch {entry['epoch']:3d} step {entry['step']:5d} "
            f"train_nll {entry['train_nll']:.5f} val_nll {entry['val_nll']:.5f} "
            f"val_mse {entry['val_mse']:.5f}",
            file=sys.stderr,
        )

    try:
        model, log = train(model, train_trajs, val_trajs, train_cfg,
                           start_step=start_step, adam=adam, log_fn=log_fn)
    except NumericalError as exc:
        dump = {
            "error": str(exc),
            "config": cfg,
            "param_norms": {name: float(np.linalg.norm(p.value))
                            for name, p in model.named_parameters()},
        }
        dump_json(dump, os.path.join(out_dir, "nan_dump.json"))
        raise

    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    dump_json(checkpoint_to_json(model, adam=adam,
                                 extra={"train_config": train_cfg.to_dict()}),
              ckpt_path)
    dump_json({"log": log}, os.path.join(out_dir, "metrics_log.json"))
    data_paths = [args.data] + ([args.val] if args.val else [])
    _write_manifest(out_dir, "train", train_cfg.seed, cfg, data_paths,
                    extra={"steps": log[-1]["step"] if log else start_step})
    print(f"wrote {ckpt_path}", file=sys.stderr)
    return EXIT_OK


def _fresh_adam(model, train_cfg):
    from .autodiff import AdamState

    return AdamState.for_params(model.parameters(), lr=train_cfg.lr,
                                beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                                eps=train_cfg.eps)


def _records_for(model, trajs, protocol, t_split, threads):
    if protocol == "standard":
        return model_predictions(model, trajs, threads=threads)
    return model_predictions_holdout(model, trajs, t_split, threads=threads)


def cmd_predict(args) -> int:
    model, _, _ = _load_checkpoint(args.checkpoint)
    trajs = load_dataset(args.data)
    protocol, t_split = _parse_protocol(args.protocol)
    out_dir = _ensure_out_dir(args)
    records = _records_for(model, trajs, protocol, t_split, args.threads)
    dump_json({"protocol": args.protocol, "records": records_to_json(records)},
              os.path.join(out_dir, "predictions.json"))
    _write_manifest(out_dir, "predict", args.seed or 0, None, [args.data],
                    extra={"protocol": args.protocol,
                           "checkpoint_hash": sha256_file(args.checkpoint)})
    print(f"wrote predictions for {len(records)} points", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    seed = args.seed if args.seed is not None else 0
    protocol, t_split = _parse_protocol(args.protocol)
    out_dir = _ensure_out_dir(args)
    trajs = load_dataset(args.data)
    data_paths = [args.data]

    if args.predictions:
        blob = _load_json_file(args.predictions, "data")
        records = records_from_json(blob["records"])
        ckpt_hash = None
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint or --predictions")
        model, _, _ = _load_checkpoint(args.checkpoint)
        records = _records_for(model, trajs, protocol, t_split, args.threads)
        ckpt_hash = sha256_file(args.checkpoint)

    report = evaluation_report(records, split="test", protocol=args.protocol,
                               seed=seed)
    if args.ood_data:
        if args.predictions:
            raise ConfigError("--ood-data requires a checkpoint evaluation")
        ood_trajs = load_dataset(args.ood_data)
        data_paths.append(args.ood_data)
        ood_records = _records_for(model, ood_trajs, protocol, t_split,
                                   args.threads)
        ood_report = evaluation_report(ood_records, split="ood",
                                       protocol=args.protocol, seed=seed + 100)
        sd_mse = report["metrics"]["mse"]["value"]
        ood_mse = ood_report["metrics"]["mse"]["value"]
        report["ood"] = {
            "sd_mse": sd_mse,
            "ood_mse": ood_mse,
            "ratio": ood_mse / sd_mse if sd_mse > 0 else float("nan"),
            "n": ood_report["metrics"]["mse"]["n"],
        }
        report["ood_report"] = ood_report

    if args.prior_only:
        prior_records = prior_only_predictions(
            model, trajs, t_split=t_split, threads=args.threads
        )
        prior_report = evaluation_report(prior_records, split="prior-only",
                                         protocol=args.protocol, seed=seed + 200)
        report["prior_only"] = prior_report["metrics"]

    dump_json(report, os.path.join(out_dir, "report.json"))
    rows = report_csv_rows(report)
    if "ood_report" in report:
        rows += report_csv_rows(report["ood_report"])
    write_csv(rows, os.path.join(out_dir, "report.csv"))
    if not args.predictions:
        dump_json({"protocol": args.protocol,
                   "records": records_to_json(records)},
                  os.path.join(out_dir, "predictions.json"))
    _write_manifest(out_dir, "evaluate", seed, None, data_paths,
                    extra={"protocol": args.protocol,
                           "checkpoint_hash": ckpt_hash})
    print(json.dumps(report["metrics"], indent=2), file=sys.stderr)
    return EXIT_OK


def cmd_baseline(args) -> int:
    seed = args.seed if args.seed is not None else 0
    trajs = load_dataset(args.data)
    out_dir = _ensure_out_dir(args)
    records = naive_predictions(trajs, threads=args.threads)
    report = evaluation_report(records, split="naive", protocol="standard",
                               seed=seed)
    dump_json(report, os.path.join(out_dir, "naive_report.json"))
    write_csv(report_csv_rows(report), os.path.join(out_dir, "naive_report.csv"))
    dump_json({"protocol": "standard", "records": records_to_json(records)},
              os.path.join(out_dir, "naive_predictions.json"))
    _write_manifest(out_dir, "baseline", seed, None, [args.data])
    print(json.dumps(report["metrics"]["mse"], indent=2), file=sys.stderr)
    return EXIT_OK


def cmd_inspect_spectrum(args) -> int:
    model, _, _ = _load_checkpoint(args.checkpoint)
    trajs = load_dataset(args.data)
    out_dir = _ensure_out_dir(args)
    summary = eigenvalue_summary(model, trajs, threads=args.threads)
    dump_json(summary, os.path.join(out_dir, "spectrum.json"))
    rows = []
    for name, comp in summary["components"].items():
        rows.append([f"eig.{name}.mean", "test", "", comp["mean"], "", "",
                     summary["n_trajectories"]])
        rows.append([f"eig.{name}.std", "test", "", comp["std"], "", "",
                     summary["n_trajectories"]])
    write_csv(rows, os.path.join(out_dir, "spectrum.csv"))
    _write_manifest(out_dir, "inspect-spectrum", args.seed or 0, None,
                    [args.data],
                    extra={"checkpoint_hash": sha256_file(args.checkpoint),
                           "class": summary["class"]})
    print(f"eigenvalue class: {summary['class']}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spectralsde",
        description="Spectral piecewise-linear SDE forecasting harness",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the seed used by the subcommand")
    common.add_argument("--config", type=str, default=None,
                        help="JSON config / benchmark spec file")
    common.add_argument("--out-dir", type=str, default=None,
                        help="output directory (default: current)")
    common.add_argument("--threads", type=int, default=1,
                        help="evaluation parallelism (deterministic)")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common],
                       help="generate a benchmark dataset from a spec")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True, help="training JSONL")
    p.add_argument("--val", default=None, help="validation JSONL")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", parents=[common],
                       help="evaluate a checkpoint (or saved predictions)")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--ood-data", default=None,
                   help="paired out-of-distribution-control test set")
    p.add_argument("--protocol", default="standard",
                   help="standard | holdout:<t>")
    p.add_argument("--predictions", default=None,
                   help="re-evaluate saved predictions instead of a checkpoint")
    p.add_argument("--prior-only", action="store_true",
                   help="also report the zero-shot (no conditioning) predictor")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common],
                       help="dump per-time predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", default="standard")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("baseline", parents=[common],
                       help="last-observation baseline metrics")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("inspect-spectrum", parents=[common],
                       help="emitted-eigenvalue table over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_inspect_spectrum)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
