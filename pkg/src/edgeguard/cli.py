"""Command-line workflow: preprocess, train, fedsim, evaluate, bench.

Every command reads a JSON run config (``--config``), applies flag overrides,
writes the fully resolved config to the output directory and emits JSON
reports.  Exit codes: 0 success, 2 config error, 3 data error, 4 runtime or
numerical error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import fedsim as F
from . import model as M
from . import pipeline as P
from .errors import (ConfigError, DimensionError, EdgeGuardError, IngestionError, ModelFileError, NumericalError,
                     ParameterError, ThresholdError)

log = logging.getLogger("edgeguard")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "seed": None,
    "out": "runs/default",
    "data_dir": None,
    "dataset": [],
    "schema": None,
    "pipeline": {},
    "architecture": {},
    "train": {},
    "fedsim": {},
    "eval": {"profile": "balanced"},
    "bench": {"repetitions": 50, "batch_sizes": [1, 256], "warmup": 3, "budget_ms": E.LATENCY_BUDGET_MS},
}

# ---------------------------------------------------------------------------
# config


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _check_keys(section, data, cls):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")


def resolve_config(path=None, seed=None, out=None, dataset=None, profile=None, base_dir=None):
    """Merge file config with flag overrides (flags win) and resolve every path."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    base = Path(base_dir or Path.cwd())
    if path is not None:
        path = Path(path)
        try:
            cfg = _merge(cfg, json.loads(path.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = path.resolve().parent
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
        base_out = Path.cwd()
    else:
        base_out = base
    if dataset:
        cfg["dataset"] = list(dataset)
        base_data = Path.cwd()
    else:
        base_data = base
    if profile is not None:
        cfg["eval"]["profile"] = profile
    if cfg["seed"] is None:
        raise ConfigError("a root seed is required (config 'seed' or --seed)")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    cfg["out"] = str((base_out / cfg["out"]).resolve())
    cfg["data_dir"] = str((base / cfg["data_dir"]).resolve()) if cfg["data_dir"] else cfg["out"]
    cfg["dataset"] = [str((base_data / p).resolve()) for p in cfg["dataset"]]
    if cfg["schema"]:
        cfg["schema"] = str((base / cfg["schema"]).resolve())
    _check_keys("pipeline", cfg["pipeline"], P.PipelineConfig)
    _check_keys("train", cfg["train"], M.TrainConfig)
    _check_keys("architecture", cfg["architecture"], M.Architecture)
    _check_keys("fedsim", cfg["fedsim"], F.FedConfig)
    if "seed" in cfg["train"] or "seed" in cfg["fedsim"]:
        raise ConfigError("component seeds derive from the root seed; set only the top-level 'seed'")
    try:
        F.FedConfig(**cfg["fedsim"])
        M.TrainConfig(**cfg["train"])
        P.PipelineConfig(**cfg["pipeline"])
    except (TypeError, ParameterError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["bench"].get("repetitions", 50) < 5:
        raise ConfigError("bench.repetitions must be >= 5")
    E.get_profile(cfg["eval"]["profile"])
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def derived_seeds(root):
    """Independent sub-seeds for pipeline, model init, training and federated sampling."""
    pipe, init, train, fed = (int(s) for s in np.random.SeedSequence(root).generate_state(4))
    return {"pipeline": pipe, "init": init, "train": train, "fedsim": fed}


def _write_config(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


def _load_split(cfg, name):
    path = Path(cfg["data_dir"]) / f"{name}.egfm"
    if not path.exists():
        raise IngestionError(f"missing preprocessed artifact {path}; run 'preprocess' first")
    return P.FeatureMatrix.load(path)


def _train_config(cfg, seeds):
    return M.TrainConfig(**cfg["train"], seed=seeds["train"])


def _architecture(cfg, dim):
    overrides = dict(cfg["architecture"])
    if "input_dim" in overrides and overrides["input_dim"] != dim:
        raise DimensionError(f"architecture input_dim {overrides['input_dim']} != feature dimension {dim}")
    overrides["input_dim"] = dim
    return M.Architecture(**overrides)


def _check_dim(model, fm, what):
    if model.arch.input_dim != fm.dim:
        raise DimensionError(
            f"model expects {model.arch.input_dim} features but the {what} matrix has {fm.dim}")


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(cfg):
    if not cfg["dataset"]:
        raise ConfigError("no dataset given (config 'dataset' or --dataset)")
    seeds = derived_seeds(cfg["seed"])
    schema = P.Schema.from_json(cfg["schema"]) if cfg["schema"] else None
    raw = P.load_csv(cfg["dataset"], schema)
    res = P.preprocess(raw, P.PipelineConfig(**cfg["pipeline"]), seeds["pipeline"])
    out = _write_config(cfg)
    res.train.save(out / "train.egfm")
    res.val.save(out / "val.egfm")
    res.test.save(out / "test.egfm")
    E.write_json_report(res.spec.to_dict(), out / "transform.json")
    E.write_json_report(res.audit, out / "audit.json")
    log.info("preprocessed %d rows -> train %d / val %d / test %d, %d features", res.audit["rows_loaded"],
             len(res.train), len(res.val), len(res.test), res.audit["n_features"])
    return res.audit


def cmd_train(cfg, resume=None):
    seeds = derived_seeds(cfg["seed"])
    train_fm, val_fm = _load_split(cfg, "train"), _load_split(cfg, "val")
    out = _write_config(cfg)
    history_path = out / "history.jsonl"
    if resume:
        mp = M.load(resume)
        _check_dim(mp, train_fm, "training")
        mode = "a"
    else:
        mp = M.build(_architecture(cfg, train_fm.dim), seeds["init"])
        mode = "w"
    model_path = out / "model.egrd"
    with open(history_path, mode) as fh:
        def log_epoch(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            log.info("epoch %d: train_loss %.4f val_loss %s val_acc %s", rec["epoch"], rec["train_loss"],
                     rec.get("val_loss"), rec.get("val_accuracy"))
        try:
            trained, history = M.train(mp, train_fm, val_fm if len(val_fm) else None,
                                       _train_config(cfg, seeds), on_epoch=log_epoch)
        except NumericalError as exc:
            if exc.checkpoint is not None:
                M.save(exc.checkpoint, out / "checkpoint.egrd")
            raise
    M.save(trained, model_path)
    return {"model": str(model_path), "epochs": len(history), "history": str(history_path)}


def cmd_fedsim(cfg):
    seeds = derived_seeds(cfg["seed"])
    train_fm, val_fm = _load_split(cfg, "train"), _load_split(cfg, "val")
    fed = F.FedConfig(**cfg["fedsim"], seed=seeds["fedsim"])
    out = _write_config(cfg)
    shards = F.partition(train_fm, fed.n_clients, fed.scheme, fed.alpha, fed.seed)
    init = M.build(_architecture(cfg, train_fm.dim), seeds["init"])
    log_path = out / "rounds.jsonl"
    with open(log_path, "w") as fh:
        def log_round(rec):
            fh.write(rec.to_json() + "\n")
            fh.flush()
            log.info("round %d: clients %s %s", rec.round, rec.clients, rec.global_metrics)
        final, records = F.run_rounds(shards, init, fed, _train_config(cfg, seeds),
                                      val_fm if len(val_fm) else None, on_round=log_round)
    model_path = out / "fedsim_model.egrd"
    M.save(final, model_path)
    return {"model": str(model_path), "rounds": len(records), "log": str(log_path)}


def cmd_evaluate(cfg, model_path):
    mp = M.load(model_path)
    test_fm = _load_split(cfg, "test")
    _check_dim(mp, test_fm, "test")
    profile = cfg["eval"]["profile"]
    val_path = Path(cfg["data_dir"]) / "val.egfm"
    val_fm = P.FeatureMatrix.load(val_path) if val_path.exists() else None
    if val_fm is not None and len(val_fm) and len(np.unique(val_fm.y)) == 2:
        _check_dim(mp, val_fm, "validation")
        threshold = E.select_threshold(val_fm.y, M.forward_infer(mp, val_fm.X, 4096), profile)
        source = "validation"
    else:
        threshold, source = 0.5, "default"
    scores = M.forward_infer(mp, test_fm.X, 4096)
    audit_path = Path(cfg["data_dir"]) / "audit.json"
    provenance = {
        "config_sha256": config_hash(cfg),
        "model": str(Path(model_path).resolve()),
        "threshold_source": source,
        "dataset": json.loads(audit_path.read_text())["sources"] if audit_path.exists() else cfg["dataset"],
        "test_rows": len(test_fm),
        "note": "Precision/recall derive from the confusion counts at the selected threshold.",
    }
    report = E.evaluate_scores(test_fm.y, scores, threshold, profile, provenance)
    out = _write_config(cfg)
    E.write_json_report(report.to_dict(), out / "eval_report.json")
    report.write_roc_csv(out / "roc.csv")
    return report.to_dict()


def cmd_bench(cfg, model_path):
    mp = M.load(model_path).strip_decoder()
    test_path = Path(cfg["data_dir"]) / "test.egfm"
    if test_path.exists():
        fm = P.FeatureMatrix.load(test_path)
        _check_dim(mp, fm, "test")
        X = fm.X[:4096]
    else:
        X = np.random.default_rng(cfg["seed"]).normal(size=(512, mp.arch.input_dim))
    b = cfg["bench"]
    stats = E.latency_bench(lambda batch: M.forward_infer(mp, batch), X, b.get("repetitions", 50),
                            b.get("batch_sizes", [1, 256]), b.get("warmup", 3),
                            b.get("budget_ms", E.LATENCY_BUDGET_MS))
    out = _write_config(cfg)
    E.write_json_report(stats, out / "latency.json")
    return stats


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="edgeguard", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("preprocess", "train", "fedsim", "evaluate", "bench"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--dataset", action="append", help="input CSV; repeatable")
        p.add_argument("--profile", help="threshold profile: " + ", ".join(sorted(E.PROFILES)))
        if name in ("train", "evaluate", "bench"):
            p.add_argument("--model", type=Path, help="model file (for train: resume from it)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.config, args.seed, args.out, args.dataset, args.profile)
        model = getattr(args, "model", None)
        if args.command == "preprocess":
            result = cmd_preprocess(cfg)
        elif args.command == "train":
            result = cmd_train(cfg, resume=model)
        elif args.command == "fedsim":
            result = cmd_fedsim(cfg)
        else:
            model = model or Path(cfg["out"]) / "model.egrd"
            if not Path(model).exists():
                raise ModelFileError(f"model file {model} not found")
            result = cmd_evaluate(cfg, model) if args.command == "evaluate" else cmd_bench(cfg, model)
    except (ConfigError, ThresholdError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, DimensionError, ModelFileError, ParameterError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EdgeGuardError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, indent=2, sort_keys=True, default=E.json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
