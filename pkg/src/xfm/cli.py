"""Command-line surface: train, evaluate, gridsearch, verify, synthesize.

Configuration is flat ``key = value`` text with dotted sections (``data.``,
``model.``, ``train.``, ``output.``, ``grid.``). Every key can also be passed
as a flag with the same name, which overrides the file value. Exit codes:
0 success, 1 verification failure, 2 usage or config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data, metrics, model, optim, oracle, plots
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    ParseError,
    XfmError,
)
from .numerics import derive_seed

DATA_KEYS = (
    "data.train",
    "data.valid",
    "data.test",
    "data.schema",
    "data.split",
    "data.split_seed",
)
MODEL_KEYS = (
    "model.preset",
    "model.parts",
    "model.embedding_dim",
    "model.dnn_widths",
    "model.dnn_activation",
    "model.cin_widths",
    "model.cin_activation",
    "model.cin_rank",
    "model.cross_depth",
    "model.fm_weight_trainable",
)
TRAIN_KEYS = (
    "train.lr",
    "train.batch_size",
    "train.max_epochs",
    "train.lambda",
    "train.patience",
    "train.seed",
)
OUTPUT_KEYS = ("output.dir",)
GRID_KEYS = (
    "grid.cin_depth",
    "grid.cin_width",
    "grid.dnn_depth",
    "grid.dnn_width",
    "grid.activation",
    "grid.lr",
    "grid.lambda",
    "grid.jobs",
)

GRID_FIELDS = (
    "cin_depth",
    "cin_width",
    "dnn_depth",
    "dnn_width",
    "activation",
    "lr",
    "lambda",
)

VERIFY_CHECKS = {
    "collinearity": lambda seed: oracle.run_collinearity_checks(seed=seed),
    "polynomial": lambda seed: oracle.run_polynomial_check(seed=seed),
    "params": lambda seed: oracle.run_census_check(seed=seed),
    "fm_reduction": lambda seed: oracle.run_fm_reduction_check(seed=seed),
    "gradients": lambda seed: oracle.run_gradient_check(seed=seed),
}


def _read_text(path) -> str:
    return Path(path).read_text(encoding="utf-8")


def _require_file(path, what: str) -> None:
    if not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")


def _json_line(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True)


def gather_config(args: argparse.Namespace, keys: tuple[str, ...]) -> dict[str, str]:
    """Merge the optional config file with flag overrides for `keys`."""
    cfg: dict[str, str] = {}
    if getattr(args, "config", None):
        _require_file(args.config, "config file")
        cfg.update(data.parse_kv(_read_text(args.config)))
    for key in keys:
        value = vars(args).get(key)
        if value is not None:
            cfg[key] = value
    return cfg


def _parse_ratios(raw: str) -> tuple[float, float, float]:
    parts = [p for p in raw.split(",") if p.strip()]
    if len(parts) != 3:
        raise ConfigError(f"data.split needs three comma-separated ratios, got {raw!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad data.split value {raw!r}: {exc}") from exc


def resolve_datasets(cfg: dict[str, str]):
    """Load train/valid/test per the data.* section.

    Explicit valid/test paths are parsed against the training vocabulary
    (unseen tokens fall back to each field's reserved id). Without them the
    training file is split by data.split (default 0.8,0.1,0.1).
    """
    train_path = cfg.get("data.train")
    if not train_path:
        raise ConfigError("data.train is required")
    _require_file(train_path, "dataset file")
    schema_path = cfg.get("data.schema")
    if not schema_path:
        raise ConfigError("data.schema is required")
    _require_file(schema_path, "schema config")
    fields, label_column = data.load_schema_config(_read_text(schema_path))
    with open(train_path, newline="", encoding="utf-8") as fh:
        train_ds = data.parse_dataset(fh, fields, label_column)

    if cfg.get("data.valid") or cfg.get("data.test"):
        loaded = {}
        for key in ("data.valid", "data.test"):
            path = cfg.get(key)
            if not path:
                loaded[key] = None
                continue
            _require_file(path, "dataset file")
            with open(path, newline="", encoding="utf-8") as fh:
                loaded[key] = data.parse_dataset(
                    fh, fields, label_column, schema=train_ds.schema
                )
        return train_ds, loaded["data.valid"], loaded["data.test"]

    ratios = _parse_ratios(cfg.get("data.split", "0.8,0.1,0.1"))
    try:
        split_seed = int(cfg.get("data.split_seed", cfg.get("train.seed", "0")))
    except ValueError as exc:
        raise ConfigError(f"bad data.split_seed: {exc}") from exc
    return data.split(train_ds, ratios, split_seed)


def train_config_from(cfg: dict[str, str], n_train: int) -> optim.TrainConfig:
    try:
        requested = int(cfg.get("train.batch_size", "4096"))
        if n_train > 0:
            requested = min(requested, n_train)
        return optim.TrainConfig(
            lr=float(cfg.get("train.lr", "0.001")),
            batch_size=requested,
            max_epochs=int(cfg.get("train.max_epochs", "20")),
            lam=float(cfg.get("train.lambda", "0.0001")),
            patience=int(cfg.get("train.patience", "2")),
            seed=int(cfg.get("train.seed", "0")),
        )
    except ValueError as exc:
        raise ConfigError(f"bad train configuration: {exc}") from exc


def _bench_parts(
    spec: model.ModelSpec, train_ds: data.Dataset, cfg: optim.TrainConfig
) -> dict:
    """Rough per-epoch wall time of the CIN and DNN blocks in isolation.

    Informational only: times one forward/backward on a single batch per
    block and scales by the batch count.
    """
    enc = data.EncodedDataset(train_ds)
    take = min(len(train_ds), cfg.batch_size)
    batch = enc.batch(np.arange(take))
    n_batches = max(1, math.ceil(len(train_ds) / cfg.batch_size))
    out = {}
    for part in ("cin", "dnn"):
        if part not in spec.parts:
            continue
        solo = model.replace_spec(spec, parts=frozenset({part}))
        params = model.init_params(
            solo, train_ds.schema.n_features, train_ds.schema.field_count, seed=0
        )
        start = time.perf_counter()
        preds, cache = model.forward_batch(params, batch)
        grad_z = (preds - batch.labels) / batch.size
        model.backward_batch(params, batch, cache, grad_z)
        elapsed = time.perf_counter() - start
        out[f"{part}_seconds_per_epoch"] = elapsed * n_batches
    return out


def cmd_train(args: argparse.Namespace) -> int:
    cfg = gather_config(args, DATA_KEYS + MODEL_KEYS + TRAIN_KEYS + OUTPUT_KEYS)
    out_dir = Path(cfg.get("output.dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)

    train_ds, valid_ds, test_ds = resolve_datasets(cfg)
    spec = model.spec_from_config(cfg)
    tcfg = train_config_from(cfg, len(train_ds))
    params, history = optim.train(spec, train_ds, valid_ds, tcfg)

    model.save_checkpoint(params, out_dir / "model.ckpt")
    (out_dir / "history.jsonl").write_text(history.to_jsonl(), encoding="utf-8")
    (out_dir / "schema.json").write_text(
        _json_line(data.schema_to_json(train_ds.schema)) + "\n", encoding="utf-8"
    )

    eval_ds, eval_split = train_ds, "train"
    if test_ds is not None and len(test_ds) > 0:
        eval_ds, eval_split = test_ds, "test"
    elif valid_ds is not None and len(valid_ds) > 0:
        eval_ds, eval_split = valid_ds, "valid"
    report = metrics.evaluate(params, eval_ds)
    payload = {"split": eval_split, **report.to_dict()}
    (out_dir / "eval.json").write_text(_json_line(payload) + "\n", encoding="utf-8")

    if history.records:
        plots.render_history(
            [r.to_dict() for r in history.records], out_dir / "history.png"
        )
    if args.bench:
        print(_json_line({"bench": _bench_parts(spec, train_ds, tcfg)}))
    print(
        _json_line(
            {
                "split": eval_split,
                "auc": report.auc,
                "logloss": report.logloss,
                "epochs": len(history),
                "output_dir": str(out_dir),
            }
        )
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    _require_file(args.checkpoint, "checkpoint")
    params = model.load_checkpoint(args.checkpoint)
    snapshot = args.schema_snapshot or str(
        Path(args.checkpoint).with_name("schema.json")
    )
    _require_file(snapshot, "schema snapshot")
    schema = data.schema_from_json(json.loads(_read_text(snapshot)))
    if (
        schema.n_features != params.n_features
        or schema.field_count != params.field_count
    ):
        raise ConfigError(
            "schema snapshot does not match checkpoint dimensions "
            f"({schema.n_features} features / {schema.field_count} fields vs "
            f"{params.n_features} / {params.field_count})"
        )
    _require_file(args.data, "dataset file")
    with open(args.data, newline="", encoding="utf-8") as fh:
        ds = data.parse_dataset(fh, schema.fields, schema.label_column, schema=schema)
    report = metrics.evaluate(params, ds)
    line = _json_line(report.to_dict())
    if args.output:
        Path(args.output).write_text(line + "\n", encoding="utf-8")
    print(line)
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    names = list(VERIFY_CHECKS) if args.checks is None else list(args.checks)
    all_passed = True
    for name in names:
        report = VERIFY_CHECKS[name](args.seed)
        print(_json_line(report))
        all_passed = all_passed and bool(report["passed"])
    return 0 if all_passed else 1


def _grid_values(
    cfg: dict[str, str], spec: model.ModelSpec, tcfg: optim.TrainConfig
) -> dict[str, list]:
    """Candidate lists per swept hyper-parameter; absent keys pin the
    base-config value as a singleton."""

    def parse_list(key: str, cast, fallback):
        raw = cfg.get(key, "").strip()
        if not raw:
            return [fallback]
        try:
            return [cast(tok) for tok in raw.split(",") if tok.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad {key} value {raw!r}: {exc}") from exc

    values = {
        "cin_depth": parse_list("grid.cin_depth", int, len(spec.cin.widths)),
        "cin_width": parse_list("grid.cin_width", int, spec.cin.widths[0]),
        "dnn_depth": parse_list("grid.dnn_depth", int, len(spec.dnn.widths)),
        "dnn_width": parse_list("grid.dnn_width", int, spec.dnn.widths[0]),
        "activation": parse_list("grid.activation", str, spec.cin.activation),
        "lr": parse_list("grid.lr", float, tcfg.lr),
        "lambda": parse_list("grid.lambda", float, tcfg.lam),
    }
    for key, vals in values.items():
        if not vals:
            raise ConfigError(f"grid.{key} must list at least one value")
    return values


def _apply_combo(spec: model.ModelSpec, combo: dict) -> model.ModelSpec:
    changes = {}
    if "cin" in spec.parts:
        changes["cin"] = model.CinConfig(
            (combo["cin_width"],) * combo["cin_depth"],
            combo["activation"],
            spec.cin.rank,
        )
    if "dnn" in spec.parts:
        changes["dnn"] = model.DnnConfig(
            (combo["dnn_width"],) * combo["dnn_depth"], spec.dnn.activation
        )
    return model.replace_spec(spec, **changes)


def cmd_gridsearch(args: argparse.Namespace) -> int:
    cfg = gather_config(
        args, DATA_KEYS + MODEL_KEYS + TRAIN_KEYS + OUTPUT_KEYS + GRID_KEYS
    )
    out_dir = Path(cfg.get("output.dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)

    train_ds, valid_ds, _ = resolve_datasets(cfg)
    if valid_ds is None or len(valid_ds) == 0:
        raise ConfigError("gridsearch needs a non-empty validation split")
    spec = model.spec_from_config(cfg)
    tcfg = train_config_from(cfg, len(train_ds))
    values = _grid_values(cfg, spec, tcfg)
    combos = [
        dict(zip(GRID_FIELDS, picks))
        for picks in itertools.product(*(values[f] for f in GRID_FIELDS))
    ]
    print(
        _json_line(
            {
                "combinations": len(combos),
                "swept": {f: values[f] for f in GRID_FIELDS},
            }
        )
    )

    def run_combo(item: tuple[int, dict]) -> dict:
        index, combo = item
        row = {f: combo[f] for f in GRID_FIELDS}
        row.update(
            {
                "seed": derive_seed(tcfg.seed, index),
                "valid_auc": "",
                "valid_logloss": "",
                "status": "ok",
                "error": "",
            }
        )
        try:
            combo_spec = _apply_combo(spec, combo)
            combo_cfg = dataclasses.replace(
                tcfg, lr=combo["lr"], lam=combo["lambda"], seed=row["seed"]
            )
            params, _ = optim.train(combo_spec, train_ds, valid_ds, combo_cfg)
            report = metrics.evaluate(params, valid_ds)
            row["valid_auc"] = report.auc
            row["valid_logloss"] = report.logloss
        except XfmError as exc:
            row["status"] = "failed"
            row["error"] = str(exc)
        return row

    try:
        jobs = int(cfg.get("grid.jobs", "0"))
    except ValueError as exc:
        raise ConfigError(f"bad grid.jobs: {exc}") from exc
    if jobs < 1:
        jobs = min(4, len(combos))
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        rows = list(pool.map(run_combo, enumerate(combos)))

    ok_rows = sorted(
        (r for r in rows if r["status"] == "ok"),
        key=lambda r: (-r["valid_auc"], [r[f] for f in GRID_FIELDS]),
    )
    failed_rows = [r for r in rows if r["status"] == "failed"]
    ranked = ok_rows + failed_rows

    columns = list(GRID_FIELDS) + ["valid_auc", "valid_logloss", "seed", "status", "error"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in ranked:
        writer.writerow(row)
    (out_dir / "grid_results.csv").write_text(buf.getvalue(), encoding="utf-8")
    plots.render_grid(ranked, out_dir / "grid_results.png")

    summary = {
        "combinations": len(combos),
        "failed": len(failed_rows),
        "output_dir": str(out_dir),
    }
    if ok_rows:
        summary["best"] = {f: ok_rows[0][f] for f in GRID_FIELDS}
        summary["best_valid_auc"] = ok_rows[0]["valid_auc"]
    print(_json_line(summary))
    return 0


def cmd_synthesize(args: argparse.Namespace) -> int:
    _require_file(args.spec, "synthetic spec")
    spec = data.load_synthetic_spec(_read_text(args.spec))
    dataset, manifest = data.synthesize_full(spec)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    data.serialize_dataset(dataset, buf)
    (out_dir / "data.csv").write_text(buf.getvalue(), encoding="utf-8")
    (out_dir / "data.schema").write_text(
        data.format_schema_config(dataset.schema.fields, dataset.schema.label_column),
        encoding="utf-8",
    )
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        _json_line(
            {
                "rows": len(dataset),
                "fields": dataset.schema.field_count,
                "features": dataset.schema.n_features,
                "output_dir": str(out_dir),
            }
        )
    )
    return 0


def _add_config_flags(parser: argparse.ArgumentParser, keys: tuple[str, ...]) -> None:
    parser.add_argument(
        "--config", metavar="FILE", help="flat key = value file; flags override it"
    )
    for key in keys:
        parser.add_argument(f"--{key}", dest=key, metavar="V", help=f"set {key}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xfm",
        description="Factorization models over multi-field categorical data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit a model and write run artifacts")
    _add_config_flags(p_train, DATA_KEYS + MODEL_KEYS + TRAIN_KEYS + OUTPUT_KEYS)
    p_train.add_argument(
        "--bench",
        action="store_true",
        help="also report rough per-epoch seconds for the CIN and DNN blocks",
    )
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="score a dataset with a checkpoint")
    p_eval.add_argument("--checkpoint", required=True, metavar="FILE")
    p_eval.add_argument(
        "--schema-snapshot",
        metavar="FILE",
        help="schema.json from the training run (default: next to the checkpoint)",
    )
    p_eval.add_argument("--data", required=True, metavar="FILE")
    p_eval.add_argument("--output", metavar="FILE", help="also write the report here")
    p_eval.set_defaults(func=cmd_evaluate)

    p_grid = sub.add_parser("gridsearch", help="rank hyper-parameter combinations")
    _add_config_flags(
        p_grid, DATA_KEYS + MODEL_KEYS + TRAIN_KEYS + OUTPUT_KEYS + GRID_KEYS
    )
    p_grid.set_defaults(func=cmd_gridsearch)

    p_verify = sub.add_parser("verify", help="run internal consistency checks")
    p_verify.add_argument(
        "--checks",
        nargs="*",
        choices=sorted(VERIFY_CHECKS),
        default=None,
        metavar="CHECK",
        help=f"subset of {{{', '.join(sorted(VERIFY_CHECKS))}}}; default all",
    )
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.set_defaults(func=cmd_verify)

    p_synth = sub.add_parser("synthesize", help="generate a labelled dataset")
    p_synth.add_argument("--spec", required=True, metavar="FILE")
    p_synth.add_argument("--output-dir", default=".", metavar="DIR")
    p_synth.set_defaults(func=cmd_synthesize)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ParseError, DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except XfmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
