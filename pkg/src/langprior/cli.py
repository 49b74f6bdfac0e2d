"""``langprior`` command line: gen-data, train, eval, diagnose, weights.

Configuration is one flat JSON object holding any ``SyntheticConfig`` and
``TrainConfig`` field; omitted fields take their defaults and ``--seed``
overrides the file. Exit codes: 0 ok, 2 bad input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from langprior import diagnostics
from langprior.datagen import Dataset, SyntheticConfig, dataset_stats, generate
from langprior.net import (
    TrainConfig,
    TrainingTrace,
    load_checkpoint,
    predict_batch,
    save_checkpoint,
    train,
)
from langprior.rescale import build_weight_table
from langprior.vocab import load_tables, load_vocab, save_tables, save_vocab

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def resolve_config(path: str | None, seed: int | None) -> dict:
    """Merge defaults, the JSON config file and ``--seed``."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise InputError("config file must hold a JSON object")
    known = set(asdict(SyntheticConfig())) | set(asdict(TrainConfig()))
    unknown = sorted(set(raw) - known)
    if unknown:
        raise InputError(f"unknown config keys: {', '.join(unknown)}")
    if seed is not None:
        raw["seed"] = seed
    data_cfg = SyntheticConfig.from_dict(raw)
    train_cfg = TrainConfig.from_dict(raw)
    data_cfg.validate()
    train_cfg.validate()
    return {**asdict(data_cfg), **asdict(train_cfg)}


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {path}: {exc}") from None
    return out


def _load_split(data_dir: Path, split: str) -> Dataset:
    path = data_dir / f"{split}.jsonl"
    if not path.exists():
        raise InputError(f"missing {path}")
    return Dataset.read_jsonl(path)


def _load_data_dir(data_dir: str):
    d = Path(data_dir)
    if not d.is_dir():
        raise InputError(f"data directory not found: {data_dir}")
    for name in ("vocab.json", "counts.json"):
        if not (d / name).exists():
            raise InputError(f"missing {d / name}")
    vocab, types = load_vocab(d / "vocab.json")
    _, table = load_tables(d / "counts.json")
    if table.num_answers != len(vocab) or tuple(table.types) != tuple(types):
        raise InputError("counts.json does not match vocab.json")
    return d, vocab, types, table


def _check_dataset(ds: Dataset, vocab, types, name: str) -> None:
    if ds.num_answers != len(vocab):
        raise InputError(f"{name}: {ds.num_answers} answers per label, vocabulary has {len(vocab)}")
    if ds.type_ids.min() < 0 or ds.type_ids.max() >= len(types):
        raise InputError(f"{name}: question type ids out of range")


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    out = _out_dir(args.out)
    data = generate(SyntheticConfig.from_dict(cfg))
    data.train.write_jsonl(out / "train.jsonl")
    data.test.write_jsonl(out / "test.jsonl")
    save_vocab(out / "vocab.json", data.vocab, data.types)
    save_tables(out / "counts.json", data.vocab, data.train.count_table(data.types))
    _dump(out / "config.json", cfg)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    tcfg = TrainConfig.from_dict(cfg)
    d, vocab, types, table = _load_data_dir(args.data)
    ds = _load_split(d, "train")
    _check_dataset(ds, vocab, types, "train.jsonl")
    weights = build_weight_table(table) if tcfg.use_rescale else None
    params, trace = train(ds, tcfg, weights, table if tcfg.use_mask else None)
    ckpt = Path(args.out)
    out = _out_dir(str(ckpt.parent))
    save_checkpoint(ckpt, params, vocab.answers, types, tcfg)
    trace.write_csv(out / "trace.csv")
    _dump(out / "config.json", cfg)
    return EXIT_OK


def _load_ckpt(path: str, vocab, types):
    if not Path(path).exists():
        raise InputError(f"checkpoint not found: {path}")
    try:
        params, obj = load_checkpoint(path)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"bad checkpoint {path}: {exc}") from None
    if obj.get("answers") is not None and tuple(obj["answers"]) != tuple(vocab.answers):
        raise InputError("checkpoint vocabulary does not match the data vocabulary")
    if obj.get("types") is not None and tuple(obj["types"]) != tuple(types):
        raise InputError("checkpoint question types do not match the data")
    return params, obj


def evaluate(params, ds: Dataset, table, num_types: int) -> dict:
    if ds.q.shape[1] != params.q_dim or ds.v.shape[1] != params.v_dim:
        raise InputError("feature dimensions do not match the checkpoint")
    pred = predict_batch(ds.q, ds.v, params)
    stats = dataset_stats(ds, table, pred)
    return {
        "n": len(ds),
        "accuracy": diagnostics.vqa_accuracy(pred, ds.counts),
        "per_type_accuracy": diagnostics.per_type_accuracy(pred, ds.counts, ds.type_ids, num_types),
        "kappa": diagnostics.cohens_kappa(pred, diagnostics.hard_labels(ds.counts)),
        "out_of_type_rate": stats.overall_out_of_type_rate,
        "per_type_out_of_type_rate": stats.out_of_type_rate.tolist(),
    }


def cmd_eval(args) -> int:
    d, vocab, types, table = _load_data_dir(args.data)
    params, obj = _load_ckpt(args.ckpt, vocab, types)
    out = _out_dir(args.out)
    metrics = {}
    for split in args.splits:
        ds = _load_split(d, split)
        _check_dataset(ds, vocab, types, f"{split}.jsonl")
        metrics[split] = evaluate(params, ds, table, len(types))
    _dump(out / "metrics.json", metrics)
    _dump(out / "config.json", {"checkpoint": str(args.ckpt), "data": str(args.data),
                                "splits": list(args.splits),
                                "train_config": obj.get("train_config")})
    return EXIT_OK


def cmd_diagnose(args) -> int:
    d, vocab, types, table = _load_data_dir(args.data)
    params, obj = _load_ckpt(args.ckpt, vocab, types)
    out = _out_dir(args.report)
    ds = _load_split(d, args.split)
    _check_dataset(ds, vocab, types, f"{args.split}.jsonl")
    loss_kind = (obj.get("train_config") or {}).get("loss_kind", "soft_ce")
    summary: dict = {"split": args.split, "loss_kind": loss_kind, "types": {}}
    for j, name in enumerate(types):
        entry: dict = {"type": name}
        try:
            conf = diagnostics.loss_confusion(params, ds, j, table, loss_kind)
        except ValueError as exc:
            entry["error"] = str(exc)
            summary["types"][str(j)] = entry
            continue
        conf.write_csv(out / f"confusion_type{j}.csv", vocab.answers)
        entry["mispredicted"] = int(conf.counts.sum())
        try:
            upper, lower, ratio = diagnostics.triangle_asymmetry(conf)
            entry.update(upper_mean=upper, lower_mean=lower, ratio=ratio)
        except ValueError as exc:
            entry["error"] = str(exc)
        summary["types"][str(j)] = entry
    trace_path = Path(args.trace) if args.trace else Path(args.ckpt).parent / "trace.csv"
    if trace_path.exists():
        series = diagnostics.gradient_norm_trace(TrainingTrace.read_csv(trace_path), out / "gradnorms.csv")
        summary["gradient_norm_trend"] = {
            g: diagnostics.norm_trend(s) for g, s in series.items() if np.any(s > 0)
        }
    _dump(out / "summary.json", summary)
    _dump(out / "config.json", {"checkpoint": str(args.ckpt), "data": str(args.data),
                                "split": args.split, "trace": str(trace_path)})
    return EXIT_OK


def cmd_weights(args) -> int:
    if not Path(args.counts).exists():
        raise InputError(f"counts file not found: {args.counts}")
    try:
        vocab, table = load_tables(args.counts)
    except (KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"bad counts file {args.counts}: {exc}") from None
    out = Path(args.out)
    _out_dir(str(out.parent))
    build_weight_table(table).write_csv(out, table.types, vocab.answers if vocab else None)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="langprior", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--splits", nargs="+", default=["test", "train"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", parents=[common], help="loss confusion and gradient-norm reports")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", "--out", dest="report", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--trace", help="trace.csv (default: next to the checkpoint)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("weights", parents=[common], help="dump the re-scaling weight table")
    p.add_argument("--counts", required=True, help="counts JSON (types, counts[, answers])")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_weights)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"langprior {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"langprior {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
