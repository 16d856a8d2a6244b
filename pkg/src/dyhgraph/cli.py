"""Command-line batch runner: generate data, build graphs, train, evaluate.

Every command resolves its parameters in the same precedence order
(built-in defaults, then a JSON config file, then flags), echoes the
resolved values into the output directory, and writes metric files whose
bytes depend only on the inputs and the seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    PRESETS,
    GeneratorConfig,
    chronological_split,
    generate,
    preset_config,
    read_dataset,
    write_dataset,
)
from .diachronic import DiachronicConfig, DiachronicParams, write_embedding_csv
from .errors import ValidationError
from .features import (
    extract_features,
    feature_matrix,
    fit_linear,
    permutation_importance,
    write_feature_rows_csv,
    write_importance_csv,
)
from .graph import build_unrolled_graph, graph_statistics
from .metrics import average_precision, roc_auc
from .models import (
    VARIANTS,
    ModelConfig,
    assemble,
    default_config,
    eval_scores,
    infer_dataset_kind,
    load_checkpoint,
    save_checkpoint,
    summarize_reports,
    train,
)

DATASETS = ("massreg-synth", "xfraudtxn-synth", "xfraudaccount-synth")
DATASET_PRESET = {
    "massreg-synth": "uneven",
    "xfraudtxn-synth": "imbalanced-txn",
    "xfraudaccount-synth": "imbalanced-account",
}
SCORE_MODE_FLAG = {"full": "full_triple", "source-only": "source_relation_only"}


class UsageError(ValueError):
    """Bad invocation: unknown flag/subcommand or malformed value."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().rstrip()}")


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj).__name__}")


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _read_json(path) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    return payload


def _resolve(defaults: dict, args: argparse.Namespace) -> dict:
    """Defaults, then config-file values, then explicit flags."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path is not None:
        for key, value in _read_json(config_path).items():
            if key not in resolved:
                raise ValidationError(
                    f"{config_path}: unknown config key {key!r}"
                )
            resolved[key] = value
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _run_dir(args, command: str) -> Path:
    out = getattr(args, "out", None)
    if out is None:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S%f")
        out = Path("runs") / f"{stamp}-{command}"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, command: str, resolved: dict) -> None:
    _write_json(
        out / "config.json",
        {"command": command, "version": __version__, **resolved},
    )


def _load_frame(resolved: dict):
    """Events/labels/T from a dataset directory or a fresh synthesis."""
    if resolved.get("data"):
        return read_dataset(resolved["data"], resolved.get("T"))
    preset = resolved.get("preset") or DATASET_PRESET[resolved["dataset"]]
    config = preset_config(
        preset,
        n_targets=resolved["n_targets"],
        T=resolved["T"] or 13,
        seed=resolved["seed"],
    )
    events, labels, _ = generate(config)
    return events, labels, config.T


def _target_split(graph, policy: str, seed: int):
    weeks, days = graph.target_creation_times()
    name = "random_trainval" if policy == "random" else "chronological"
    return chronological_split(
        graph.target_entities, weeks, days, policy=name, seed=seed
    )


# -- generate ---------------------------------------------------------------

GENERATOR_FIELDS = {f.name for f in dataclasses.fields(GeneratorConfig)}


def cmd_generate(args) -> int:
    defaults = {
        "preset": "uneven",
        "n_targets": 1000,
        "T": 13,
        "seed": 0,
        **{
            name: None
            for name in sorted(GENERATOR_FIELDS - {"n_targets", "T", "seed"})
        },
    }
    resolved = _resolve(defaults, args)
    config = preset_config(
        resolved["preset"],
        n_targets=resolved["n_targets"],
        T=resolved["T"],
        seed=resolved["seed"],
    )
    overrides = {}
    for name in GENERATOR_FIELDS:
        value = resolved.get(name)
        if name in ("n_targets", "T", "seed") or value is None:
            continue
        if name in ("fraud_rate",):
            value = tuple(value)
        overrides[name] = value
    if overrides:
        config = dataclasses.replace(config, **overrides)
    events, labels, _ = generate(config)
    out = _run_dir(args, "generate")
    write_dataset(out, events, labels)
    _echo_config(out, "generate", {k: v for k, v in resolved.items() if v is not None})
    positives = sum(labels.binary.values())
    print(
        f"generated {len(events)} events for {len(labels.binary)} targets "
        f"({positives} positive) into {out}"
    )
    return 0


# -- build-graph ------------------------------------------------------------


def cmd_build_graph(args) -> int:
    resolved = _resolve({"data": None, "T": None}, args)
    if not resolved["data"]:
        raise ValidationError("build-graph needs --data <dir>")
    events, labels, T = read_dataset(resolved["data"], resolved["T"])
    graph = build_unrolled_graph(events, labels, T)
    stats = graph_statistics(graph)
    out = _run_dir(args, "build-graph")
    _write_json(out / "stats.json", stats)
    _echo_config(out, "build-graph", {"data": resolved["data"], "T": T})
    print(
        f"{stats['unrolled_node_count']} nodes, {stats['edge_total']} edges, "
        f"{stats['replica_count']} replicas; report in {out}"
    )
    return 0


# -- train ------------------------------------------------------------------

HYPER_KEYS = (
    "n_layers",
    "n_hid",
    "n_heads",
    "dropout",
    "lr",
    "weight_decay",
    "max_epochs",
    "patience",
)
DE_KEYS = ("de_dim", "gamma", "aggregation", "score_mode")


def _model_config(variant: str, kind: str, resolved: dict) -> ModelConfig:
    config = default_config(variant, kind)
    overrides = {k: resolved[k] for k in HYPER_KEYS if resolved.get(k) is not None}
    if resolved.get("exclude_temporal_edges"):
        overrides["exclude_temporal_edges"] = True
    de_given = {k: resolved[k] for k in DE_KEYS if resolved.get(k) is not None}
    if de_given:
        base = config.diachronic or DiachronicConfig()
        overrides["diachronic"] = dataclasses.replace(
            base,
            d=de_given.get("de_dim", base.d),
            gamma=de_given.get("gamma", base.gamma),
            aggregation=de_given.get("aggregation", base.aggregation),
            score_mode=SCORE_MODE_FLAG.get(
                de_given.get("score_mode"), base.score_mode
            ),
        )
    return dataclasses.replace(config, **overrides) if overrides else config


def _config_payload(config: ModelConfig) -> dict:
    payload = dataclasses.asdict(config)
    return payload


def _config_from_payload(payload: dict) -> ModelConfig:
    payload = dict(payload)
    if payload.get("diachronic") is not None:
        payload["diachronic"] = DiachronicConfig(**payload["diachronic"])
    return ModelConfig(**payload)


def cmd_train(args) -> int:
    defaults = {
        "variant": "dyhgn",
        "dataset": "massreg-synth",
        "preset": None,
        "data": None,
        "n_targets": 1000,
        "T": None,
        "seeds": 1,
        "seed": 0,
        "split": "chronological",
        "exclude_temporal_edges": None,
        **{k: None for k in HYPER_KEYS},
        **{k: None for k in DE_KEYS},
    }
    resolved = _resolve(defaults, args)
    events, labels, T = _load_frame(resolved)
    graph = build_unrolled_graph(events, labels, T)
    kind = infer_dataset_kind(graph)
    split = _target_split(graph, resolved["split"], resolved["seed"])
    config = _model_config(resolved["variant"], kind, resolved)

    out = _run_dir(args, "train")
    seeds = [resolved["seed"] + k for k in range(resolved["seeds"])]
    reports = []
    for seed in seeds:
        cfg = dataclasses.replace(config, seed=seed)
        model = assemble(resolved["variant"], graph, cfg)
        report = train(model, graph, split, cfg)
        reports.append(report)
        ckpt_dir = out / "checkpoints" / f"seed{seed}"
        save_checkpoint(model, ckpt_dir)
        _write_json(
            ckpt_dir / "model_config.json",
            {
                "variant": resolved["variant"],
                "dataset_kind": kind,
                "T": T,
                "model": _config_payload(cfg),
                "split": {"policy": resolved["split"], "seed": resolved["seed"]},
            },
        )
        print(
            f"seed {seed}: best val AP {report.best_val_ap:.4f} "
            f"(epoch {report.best_epoch}), test AP {report.test_ap:.4f}, "
            f"test AUC {report.test_auc:.4f}"
        )

    summary = summarize_reports(resolved["variant"], seeds, reports)
    per_seed = [
        {
            "seed": r.seed,
            "best_epoch": r.best_epoch,
            "best_val_ap": r.best_val_ap,
            "test_ap": r.test_ap,
            "test_auc": r.test_auc,
        }
        for r in reports
    ]
    # metric bytes must depend only on inputs and seeds, so wall-clock
    # timings live in reports.json instead
    _write_json(
        out / "metrics.json",
        {"dataset_kind": kind, "per_seed": per_seed, **summary},
    )
    _write_json(out / "reports.json", [r.as_dict() for r in reports])
    _echo_config(
        out,
        "train",
        {k: v for k, v in resolved.items() if v is not None},
    )
    print(
        f"{resolved['variant']}: test AP {summary['test_ap_mean']:.4f} "
        f"± {summary['test_ap_std']:.4f} over {len(seeds)} seed(s); "
        f"artifacts in {out}"
    )
    return 0


# -- evaluate ---------------------------------------------------------------


def cmd_evaluate(args) -> int:
    resolved = _resolve({"checkpoint": None, "data": None, "T": None}, args)
    if not resolved["checkpoint"] or not resolved["data"]:
        raise ValidationError("evaluate needs --checkpoint <dir> and --data <dir>")
    ckpt = Path(resolved["checkpoint"])
    stored = _read_json(ckpt / "model_config.json")
    config = _config_from_payload(stored["model"])
    events, labels, T = read_dataset(resolved["data"], resolved["T"] or stored["T"])
    graph = build_unrolled_graph(events, labels, T)
    split = _target_split(
        graph, stored["split"]["policy"], stored["split"]["seed"]
    )
    model = assemble(stored["variant"], graph, config)
    load_checkpoint(model, ckpt)

    logits = model.forward(training=False)
    scores = eval_scores(logits.data, stored["dataset_kind"])
    target_scores = scores[graph.target_nodes]
    y = graph.binary_labels
    metrics = {"variant": stored["variant"], "dataset_kind": stored["dataset_kind"]}
    for name, idx in (("val", split.val), ("test", split.test)):
        idx = np.asarray(idx)
        if idx.size:
            metrics[f"{name}_ap"] = average_precision(target_scores[idx], y[idx])
            metrics[f"{name}_auc"] = roc_auc(target_scores[idx], y[idx])
    out = _run_dir(args, "evaluate")
    _write_json(out / "metrics.json", metrics)
    _echo_config(
        out,
        "evaluate",
        {"checkpoint": str(ckpt), "data": resolved["data"], "T": T},
    )
    shown = ", ".join(
        f"{k} {v:.4f}" for k, v in metrics.items() if isinstance(v, float)
    )
    print(f"{stored['variant']}: {shown}; report in {out}")
    return 0


# -- featurize --------------------------------------------------------------


def _feature_frame(resolved: dict):
    events, labels, T = read_dataset(resolved["data"], resolved.get("T"))
    targets = sorted(labels.binary)
    y = np.array([labels.binary[t] for t in targets], dtype=np.int64)
    return events, targets, y, T


def cmd_featurize(args) -> int:
    resolved = _resolve({"data": None, "T": None, "mode": "global"}, args)
    if not resolved["data"]:
        raise ValidationError("featurize needs --data <dir>")
    events, targets, y, T = _feature_frame(resolved)
    rows = extract_features(events, targets, resolved["mode"])
    out = _run_dir(args, "featurize")
    write_feature_rows_csv(out / "feature_rows.csv", targets, rows, y)
    _echo_config(
        out,
        "featurize",
        {"data": resolved["data"], "T": T, "mode": resolved["mode"]},
    )
    print(f"{len(rows)} feature rows ({resolved['mode']}) in {out}")
    return 0


# -- baseline ---------------------------------------------------------------


def _fit_and_score(rows, y, split, l2, lr, epochs):
    # fit on train alone: the val block stays a held-out tuning set, and the
    # random_trainval policy then genuinely changes what the model sees
    matrix = feature_matrix(rows)
    fit_idx = np.asarray(split.train, dtype=np.int64)
    model = fit_linear(matrix[fit_idx], y[fit_idx], l2=l2, lr=lr, epochs=epochs)
    test_scores = model.decision_function(matrix[split.test])
    return model, {
        "test_ap": average_precision(test_scores, y[split.test]),
        "test_auc": roc_auc(test_scores, y[split.test]),
        "n_fit": int(fit_idx.size),
        "n_test": int(len(split.test)),
    }


def _row_split(rows, targets, policy: str, seed: int):
    weeks = np.array([r.week for r in rows])
    days = np.array([r.day for r in rows])
    name = "random_trainval" if policy == "random" else "chronological"
    return chronological_split(targets, weeks, days, policy=name, seed=seed)


def cmd_baseline(args) -> int:
    defaults = {
        "data": None,
        "T": None,
        "mode": None,
        "split": None,
        "seed": 0,
        "l2": 1e-3,
        "lr": 0.5,
        "epochs": 400,
    }
    resolved = _resolve(defaults, args)
    if not resolved["data"]:
        raise ValidationError("baseline needs --data <dir>")
    events, targets, y, T = _feature_frame(resolved)
    modes = [resolved["mode"]] if resolved["mode"] else ["global", "incremental"]
    splits = [resolved["split"]] if resolved["split"] else ["chronological", "random"]
    table = []
    for mode in modes:
        rows = extract_features(events, targets, mode)
        for policy in splits:
            split = _row_split(rows, targets, policy, resolved["seed"])
            _, scored = _fit_and_score(
                rows, y, split, resolved["l2"], resolved["lr"], resolved["epochs"]
            )
            table.append({"mode": mode, "split": policy, **scored})
            print(
                f"{mode:11s} {policy:13s} test AP {scored['test_ap']:.4f} "
                f"test AUC {scored['test_auc']:.4f}"
            )
    out = _run_dir(args, "baseline")
    _write_json(out / "metrics.json", {"rows": table})
    _echo_config(
        out,
        "baseline",
        {k: v for k, v in resolved.items() if v is not None},
    )
    print(f"baseline report in {out}")
    return 0


# -- importance -------------------------------------------------------------


def cmd_importance(args) -> int:
    defaults = {
        "data": None,
        "T": None,
        "mode": "global",
        "seed": 0,
        "repeats": 10,
        "l2": 1e-3,
        "lr": 0.5,
        "epochs": 400,
    }
    resolved = _resolve(defaults, args)
    if not resolved["data"]:
        raise ValidationError("importance needs --data <dir>")
    events, targets, y, T = _feature_frame(resolved)
    rows = extract_features(events, targets, resolved["mode"])
    split = _row_split(rows, targets, "chronological", resolved["seed"])
    model, scored = _fit_and_score(
        rows, y, split, resolved["l2"], resolved["lr"], resolved["epochs"]
    )
    matrix = feature_matrix(rows)
    report = permutation_importance(
        model,
        matrix[split.test],
        y[split.test],
        repeats=resolved["repeats"],
        seed=resolved["seed"],
    )
    ranked = sorted(report, key=lambda r: -r.mean_ap_drop)
    out = _run_dir(args, "importance")
    write_importance_csv(out / "importance.csv", report)
    _write_json(
        out / "metrics.json",
        {
            "test_ap": scored["test_ap"],
            "features": [dataclasses.asdict(r) for r in report],
            "ranking": [r.feature for r in ranked],
        },
    )
    _echo_config(
        out,
        "importance",
        {k: v for k, v in resolved.items() if v is not None},
    )
    top = ", ".join(f"{r.feature} ({r.mean_ap_drop:+.4f})" for r in ranked[:3])
    print(f"top features: {top}; report in {out}")
    return 0


# -- export-embeddings ------------------------------------------------------


def cmd_export_embeddings(args) -> int:
    defaults = {
        "data": None,
        "T": None,
        "seed": 0,
        "de_dim": 60,
        "gamma": 0.5,
        "aggregation": "lstm",
        "score_mode": "full",
    }
    resolved = _resolve(defaults, args)
    if not resolved["data"]:
        raise ValidationError("export-embeddings needs --data <dir>")
    events, labels, T = read_dataset(resolved["data"], resolved["T"])
    graph = build_unrolled_graph(events, labels, T)
    config = DiachronicConfig(
        d=resolved["de_dim"],
        gamma=resolved["gamma"],
        aggregation=resolved["aggregation"],
        score_mode=SCORE_MODE_FLAG.get(
            resolved["score_mode"], resolved["score_mode"]
        ),
    )
    params = DiachronicParams.for_graph(
        graph, config, np.random.default_rng(resolved["seed"])
    )
    out = _run_dir(args, "export-embeddings")
    n = write_embedding_csv(out / "embeddings.csv", graph, params)
    _echo_config(
        out,
        "export-embeddings",
        {k: v for k, v in resolved.items() if v is not None},
    )
    print(f"{n} embeddings of width {config.d} in {out}")
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="dyhgraph", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON file of parameter overrides")
        p.add_argument("--out", help="output directory (default runs/<stamp>-<command>)")
        p.add_argument("--seed", type=int)
        return p

    p = add("generate", cmd_generate, "synthesize an event-log dataset")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--n-targets", dest="n_targets", type=int)
    p.add_argument("--T", type=int)

    p = add("build-graph", cmd_build_graph, "unroll a dataset into graph statistics")
    p.add_argument("--data")
    p.add_argument("--T", type=int)

    p = add("train", cmd_train, "train a model variant over one or more seeds")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--data")
    p.add_argument("--n-targets", dest="n_targets", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--seeds", type=int)
    p.add_argument("--split", choices=("chronological", "random"))
    p.add_argument("--n-layers", dest="n_layers", type=int)
    p.add_argument("--n-hid", dest="n_hid", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--de-dim", dest="de_dim", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--aggregation", choices=("lstm", "mean"))
    p.add_argument("--score-mode", dest="score_mode", choices=sorted(SCORE_MODE_FLAG))
    p.add_argument(
        "--exclude-temporal-edges",
        dest="exclude_temporal_edges",
        action="store_true",
        default=None,
    )

    p = add("evaluate", cmd_evaluate, "score a saved checkpoint on a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--T", type=int)

    p = add("featurize", cmd_featurize, "write linker-reuse feature rows")
    p.add_argument("--data")
    p.add_argument("--T", type=int)
    p.add_argument("--mode", choices=("global", "incremental"))

    p = add("baseline", cmd_baseline, "linear baseline over the feature rows")
    p.add_argument("--data")
    p.add_argument("--T", type=int)
    p.add_argument("--mode", choices=("global", "incremental"))
    p.add_argument("--split", choices=("chronological", "random"))
    p.add_argument("--l2", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)

    p = add("importance", cmd_importance, "permutation importance report")
    p.add_argument("--data")
    p.add_argument("--T", type=int)
    p.add_argument("--mode", choices=("global", "incremental"))
    p.add_argument("--repeats", type=int)
    p.add_argument("--l2", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)

    p = add("export-embeddings", cmd_export_embeddings, "write the time-aware embedding table")
    p.add_argument("--data")
    p.add_argument("--T", type=int)
    p.add_argument("--de-dim", dest="de_dim", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--aggregation", choices=("lstm", "mean"))
    p.add_argument("--score-mode", dest="score_mode", choices=sorted(SCORE_MODE_FLAG))

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
