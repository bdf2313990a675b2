"""Experiment pipeline: generate or ingest data, split, train, evaluate, report.

Every stage reads and writes plain files under the output directory, so a
full experiment can equally be driven by `run` in one shot or by chaining
the stage subcommands; both paths share the code below and produce the
same artifacts. All randomness derives from the base seed: fold seed =
base seed + fold index, epoch seed = fold seed + epoch index, with fixed
derived streams for model init, validation triplets, and batch shuffling.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import LabeledSample, features_matrix, load_dataset, save_dataset
from .datasplit import (
    SplitAssignment,
    make_fold_splits,
    partition_samples,
    pruned_seen_taxonomy,
    split_from_json,
    split_to_json,
)
from .losses import LossConfig, combo_name, parse_combo
from .metrics import (
    MetricError,
    MetricsReport,
    acc_aware,
    acc_blind,
    build_ranked_lists,
    leaf_f1,
    mnr,
    ndcg,
    per_query_diagnostics,
    rp_at_k,
)
from .model import (
    EmbeddingModel,
    ModelConfig,
    fit,
    load_checkpoint,
    save_checkpoint,
)
from .sampler import enumerate_node_triples, instantiate_epoch
from .synthdata import SynthConfig, generate
from .taxonomy import Taxonomy, load_taxonomy, save_taxonomy

VALID_COMBOS = (
    frozenset({"L"}),
    frozenset({"L", "T"}),
    frozenset({"PL"}),
    frozenset({"PL", "T"}),
    frozenset({"PL", "B"}),
    frozenset({"PL", "B", "T"}),
)

AGGREGATE_COLUMNS = (
    ("test", "leaf_f1", "test_leaf_f1"),
    ("test", "leaf_rp_at_5", "test_leaf_rp5"),
    ("test", "mnr", "test_mnr"),
    ("test", "ndcg_sum", "test_ndcg"),
    ("prediction", "acc_blind", "pred_acc_blind"),
    ("prediction", "acc_aware", "pred_acc_aware"),
    ("prediction", "ratio_blind_aware", "pred_ratio"),
    ("prediction", "ndcg_sum", "pred_ndcg"),
)


@dataclass
class ExperimentConfig:
    out_dir: str = "runs"
    taxonomy_path: str | None = None
    dataset_path: str | None = None
    k_folds: int = 5
    combos: tuple[frozenset[str], ...] = VALID_COMBOS
    margin: float = 0.3
    epochs: int = 50
    seed: int = 0
    hidden_dim: int = 64
    embedding_dim: int = 32
    learning_rate: float = 1e-3
    batch_size: int = 32
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        for combo in self.combos:
            if combo not in VALID_COMBOS:
                raise ValueError(
                    f"{combo_name(combo)!r} is not one of the six supported combinations"
                )

    def model_config(self, input_dim: int) -> ModelConfig:
        return ModelConfig(
            input_dim=input_dim,
            hidden_dim=self.hidden_dim,
            embedding_dim=self.embedding_dim,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
        )


# -- config file ---------------------------------------------------------------


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat `key = value` lines; blank lines and # comments are ignored."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected 'key = value'")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def parse_int_range(text: str) -> tuple[int, int]:
    parts = text.split("-")
    if len(parts) == 1:
        lo = hi = int(parts[0])
    elif len(parts) == 2:
        lo, hi = int(parts[0]), int(parts[1])
    else:
        raise ValueError(f"bad range {text!r}, expected 'lo-hi'")
    return lo, hi


def parse_branching(text: str) -> tuple[tuple[int, int], ...]:
    return tuple(parse_int_range(part.strip()) for part in text.split(",") if part.strip())


def config_from_values(values: dict[str, str], overrides: dict | None = None) -> ExperimentConfig:
    merged = dict(values)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = str(value)

    def take(key, cast, default):
        return cast(merged[key]) if key in merged else default

    combos_text = merged.get("combos", "")
    combos = (
        tuple(parse_combo(p) for p in combos_text.split(",") if p.strip())
        if combos_text
        else VALID_COMBOS
    )
    base_seed = take("seed", int, 0)
    synth = SynthConfig(
        depth=take("synth_depth", int, 4),
        branching=take("synth_branching", parse_branching, ((3, 4),)),
        samples_per_leaf=take("synth_samples_per_leaf", parse_int_range, (20, 40)),
        feature_dim=take("synth_feature_dim", int, 32),
        offset_scale=take("synth_offset_scale", float, 1.0),
        decay=take("synth_decay", float, 0.6),
        noise=take("synth_noise", float, 0.3),
        seed=take("synth_seed", int, base_seed),
    )
    return ExperimentConfig(
        out_dir=merged.get("out", "runs"),
        taxonomy_path=merged.get("taxonomy"),
        dataset_path=merged.get("dataset"),
        k_folds=take("k_folds", int, 5),
        combos=combos,
        margin=take("margin", float, 0.3),
        epochs=take("epochs", int, 50),
        seed=base_seed,
        hidden_dim=take("hidden_dim", int, 64),
        embedding_dim=take("embedding_dim", int, 32),
        learning_rate=take("learning_rate", float, 1e-3),
        batch_size=take("batch_size", int, 32),
        synth=synth,
    )


def load_experiment_config(path: str | None, overrides: dict | None = None) -> ExperimentConfig:
    values = read_config_file(path) if path else {}
    return config_from_values(values, overrides)


# -- evaluation glue -----------------------------------------------------------


def head_argmax(
    model: EmbeddingModel, taxonomy: Taxonomy, samples: list[LabeledSample]
) -> dict[str, dict[str, int]]:
    """Per classification head, the argmax class of every sample, as node
    ids of the given (full) taxonomy."""
    _, logits, _ = model.forward_batch(features_matrix(samples))
    result = {}
    for head in model.layout.class_heads():
        picks = logits[head.name].argmax(axis=1)
        result[head.name] = {
            s.id: taxonomy.id_of(head.classes[i]) for s, i in zip(samples, picks)
        }
    return result


def leaf_prediction_head(model: EmbeddingModel):
    """The head that predicts leaves: the leaf head, else the deepest level
    head (whose class set is the full leaf set)."""
    if model.layout.leaf is not None:
        return model.layout.leaf
    if model.layout.levels:
        return model.layout.levels[-1]
    return None


def evaluate_model(
    model: EmbeddingModel,
    taxonomy: Taxonomy,
    dataset: list[LabeledSample],
    split: SplitAssignment,
    subset: str,
) -> MetricsReport:
    """Test-set metrics (leaf F1, RP@5, MNR, NDCG) or prediction-set metrics
    (LSA accuracies, NDCG), with the candidate pool being the subset itself."""
    if subset not in ("test", "prediction"):
        raise ValueError("subset must be 'test' or 'prediction'")
    samples = partition_samples(dataset, split, subset)
    if not samples:
        raise MetricError(f"the {subset} partition is empty")
    leaf_of = {s.id: taxonomy.leaf_id_for(s) for s in samples}
    embeddings = model.embed_all(samples)
    ranked = build_ranked_lists(embeddings, [s.id for s in samples])
    predictions = head_argmax(model, taxonomy, samples)
    leaf_head = leaf_prediction_head(model)
    leaf_preds = predictions.get(leaf_head.name) if leaf_head else None

    report = MetricsReport()
    report.ndcg_sum = ndcg(ranked, taxonomy, leaf_of, "sum")
    report.ndcg_max = ndcg(ranked, taxonomy, leaf_of, "max")
    if subset == "test":
        report.mnr = mnr(ranked, taxonomy, leaf_of)
        report.leaf_rp_at_5 = rp_at_k(ranked, leaf_of, k=5)
        if leaf_preds is not None:
            report.leaf_f1 = leaf_f1(leaf_preds, leaf_of, sorted(split.seen_leaves))
    else:
        if leaf_preds is not None:
            report.acc_blind = acc_blind(leaf_preds, leaf_of, taxonomy, split)
        if model.layout.levels:
            level_predictions = {
                head.level: predictions[head.name] for head in model.layout.levels
            }
            level_classes = {
                head.level: {taxonomy.id_of(name) for name in head.classes}
                for head in model.layout.levels
            }
            report.acc_aware = acc_aware(
                level_predictions, level_classes, leaf_of, taxonomy, split
            )
            if report.acc_blind is not None and report.acc_aware:
                report.ratio_blind_aware = report.acc_blind / report.acc_aware
    return report


# -- experiment driver ----------------------------------------------------------


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_log_csv(path: Path, log: list[dict]) -> None:
    columns: list[str] = []
    for row in log:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in log:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def load_experiment_data(config: ExperimentConfig) -> tuple[Taxonomy, list[LabeledSample]]:
    """Load taxonomy and dataset from files, or generate them synthetically."""
    if config.dataset_path or config.taxonomy_path:
        if not (config.dataset_path and config.taxonomy_path):
            raise ValueError("taxonomy and dataset paths must be given together")
        return load_taxonomy(config.taxonomy_path), load_dataset(config.dataset_path)
    return generate(config.synth)


def train_fold_combo(
    taxonomy: Taxonomy,
    dataset: list[LabeledSample],
    split: SplitAssignment,
    config: ExperimentConfig,
    combo: frozenset[str],
) -> tuple[EmbeddingModel, list[dict]]:
    fold_seed = config.seed + split.fold_index
    loss_config = LossConfig(active=combo, margin=config.margin)
    model_config = config.model_config(input_dim=len(dataset[0].features))
    return fit(dataset, taxonomy, split, loss_config, model_config, config.epochs, fold_seed)


def _format_cell(values: list[float]) -> str:
    if not values:
        return "-"
    mean = float(np.mean(values))
    sem = float(np.std(values, ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
    return f"{100 * mean:.1f} ({100 * sem:.1f})"


def aggregate_rows(
    reports: dict[tuple[int, str], dict[str, MetricsReport]],
    combo_names: list[str],
) -> list[dict[str, str]]:
    """Mean and standard error of the mean across folds, formatted as in
    percent like `62.1 (0.3)`; metrics absent in every fold show `-`."""
    folds = sorted({fold for fold, _ in reports})
    rows = []
    for name in combo_names:
        row = {"combo": name}
        for subset, metric, column in AGGREGATE_COLUMNS:
            values = []
            for fold in folds:
                entry = reports.get((fold, name))
                if entry is None or subset not in entry:
                    continue
                value = getattr(entry[subset], metric)
                if value is not None:
                    values.append(value)
            row[column] = _format_cell(values)
        rows.append(row)
    return rows


def write_aggregate_csv(path: Path, rows: list[dict[str, str]]) -> None:
    columns = ["combo"] + [column for _, _, column in AGGREGATE_COLUMNS]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def run_experiment(config: ExperimentConfig) -> list[dict[str, str]]:
    """Full pipeline: split, train, and evaluate every fold x combination,
    then aggregate into a Table-style CSV. Returns the aggregate rows."""
    out = Path(config.out_dir)
    taxonomy, dataset = load_experiment_data(config)
    if not config.dataset_path:
        data_dir = out / "data"
        data_dir.mkdir(parents=True, exist_ok=True)
        save_taxonomy(data_dir / "taxonomy.json", taxonomy)
        save_dataset(data_dir / "dataset.jsonl", dataset)
    splits = make_fold_splits(taxonomy, dataset, config.k_folds, config.seed)
    reports: dict[tuple[int, str], dict[str, MetricsReport]] = {}
    combo_names = [combo_name(c) for c in config.combos]
    for split in splits:
        fold_dir = out / f"fold_{split.fold_index}"
        _write_json(fold_dir / "split.json", split_to_json(taxonomy, split))
        for combo in config.combos:
            name = combo_name(combo)
            run_dir = fold_dir / name
            run_dir.mkdir(parents=True, exist_ok=True)
            model, log = train_fold_combo(taxonomy, dataset, split, config, combo)
            save_checkpoint(
                run_dir / "checkpoint.json",
                model,
                extra={
                    "fold": split.fold_index,
                    "combo": name,
                    "seed": config.seed + split.fold_index,
                },
            )
            _write_log_csv(run_dir / "log.csv", log)
            entry = {}
            for subset in ("test", "prediction"):
                report = evaluate_model(model, taxonomy, dataset, split, subset)
                _write_json(run_dir / f"{subset}.json", report.to_json())
                entry[subset] = report
            reports[(split.fold_index, name)] = entry
    rows = aggregate_rows(reports, combo_names)
    write_aggregate_csv(out / "aggregate.csv", rows)
    return rows


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> None:
    config = load_experiment_config(args.config, {"seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    taxonomy, dataset = generate(config.synth)
    save_taxonomy(out / "taxonomy.json", taxonomy)
    save_dataset(out / "dataset.jsonl", dataset)
    print(f"wrote {out / 'taxonomy.json'} ({len(taxonomy)} nodes, "
          f"{len(taxonomy.leaf_ids)} leaves) and {out / 'dataset.jsonl'} "
          f"({len(dataset)} samples)")


def cmd_split(args) -> None:
    taxonomy = load_taxonomy(args.taxonomy)
    dataset = load_dataset(args.dataset)
    splits = make_fold_splits(taxonomy, dataset, args.folds, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in splits:
        _write_json(out / f"split_fold_{split.fold_index}.json", split_to_json(taxonomy, split))
    print(f"wrote {len(splits)} fold splits under {out}")


def cmd_sample_triplets(args) -> None:
    taxonomy = load_taxonomy(args.taxonomy)
    dataset = load_dataset(args.dataset)
    with open(args.split, encoding="utf-8") as fh:
        split = split_from_json(taxonomy, json.load(fh))
    pruned = pruned_seen_taxonomy(taxonomy, split)
    triples = enumerate_node_triples(pruned)
    instances = instantiate_epoch(pruned, dataset, split, triples, args.epoch_seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for triple, inst in zip(triples, instances):
            fh.write(
                json.dumps(
                    {
                        "anchor": inst.anchor_id,
                        "positive": inst.positive_id,
                        "negative": inst.negative_id,
                        "anchor_node": triple.anchor_node,
                        "positive_node": triple.positive_node,
                        "negative_node": triple.negative_node,
                        "anchor_node_name": pruned.name(triple.anchor_node),
                        "positive_node_name": pruned.name(triple.positive_node),
                        "negative_node_name": pruned.name(triple.negative_node),
                    }
                )
                + "\n"
            )
    print(f"wrote {len(instances)} triplets to {out}")


def cmd_train(args) -> None:
    overrides = {"seed": args.seed, "taxonomy": args.taxonomy, "dataset": args.dataset}
    config = load_experiment_config(args.config, overrides)
    taxonomy, dataset = load_experiment_data(config)
    with open(args.split, encoding="utf-8") as fh:
        split = split_from_json(taxonomy, json.load(fh))
    if split.fold_index != args.fold:
        split = replace(split, fold_index=args.fold)
    combo = parse_combo(args.losses)
    if combo not in VALID_COMBOS:
        raise SystemExit(f"unsupported loss combination {args.losses!r}")
    model, log = train_fold_combo(taxonomy, dataset, split, config, combo)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"fold": args.fold, "combo": combo_name(combo), "seed": config.seed + args.fold}
    if config.taxonomy_path:
        extra["taxonomy"] = config.taxonomy_path
        extra["dataset"] = config.dataset_path
        extra["split"] = args.split
    save_checkpoint(out / "checkpoint.json", model, extra=extra)
    _write_log_csv(out / "log.csv", log)
    final = log[-1]["val_total"] if log else float("nan")
    print(f"trained {combo_name(combo)} fold {args.fold}: "
          f"final validation loss {final:.4f}; wrote {out / 'checkpoint.json'}")


def cmd_evaluate(args) -> None:
    model, extra = load_checkpoint(args.checkpoint)
    taxonomy_path = args.taxonomy or extra.get("taxonomy")
    dataset_path = args.dataset or extra.get("dataset")
    split_path = args.split or extra.get("split")
    for label, value in [("taxonomy", taxonomy_path), ("dataset", dataset_path), ("split", split_path)]:
        if not value:
            raise SystemExit(f"--{label} required (checkpoint does not record a {label} path)")
    taxonomy = load_taxonomy(taxonomy_path)
    dataset = load_dataset(dataset_path)
    with open(split_path, encoding="utf-8") as fh:
        split = split_from_json(taxonomy, json.load(fh))
    report = evaluate_model(model, taxonomy, dataset, split, args.set)
    _write_json(Path(args.out), report.to_json())
    if args.diagnostics:
        samples = partition_samples(dataset, split, args.set)
        leaf_of = {s.id: taxonomy.leaf_id_for(s) for s in samples}
        ranked = build_ranked_lists(model.embed_all(samples), [s.id for s in samples])
        rows = per_query_diagnostics(ranked, taxonomy, leaf_of)
        path = Path(args.diagnostics)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    print(f"wrote {args.set} metrics to {args.out}")


def cmd_report(args) -> None:
    runs = Path(args.runs)
    reports: dict[tuple[int, str], dict[str, MetricsReport]] = {}
    combo_names: list[str] = []
    fold_dirs = sorted(
        (d for d in runs.iterdir() if d.is_dir() and d.name.startswith("fold_")),
        key=lambda d: int(d.name.split("_", 1)[1]),
    )
    for fold_dir in fold_dirs:
        fold = int(fold_dir.name.split("_", 1)[1])
        for run_dir in sorted(d for d in fold_dir.iterdir() if d.is_dir()):
            entry = {}
            for subset in ("test", "prediction"):
                path = run_dir / f"{subset}.json"
                if path.exists():
                    with open(path, encoding="utf-8") as fh:
                        entry[subset] = MetricsReport.from_json(json.load(fh))
            if entry:
                reports[(fold, run_dir.name)] = entry
                if run_dir.name not in combo_names:
                    combo_names.append(run_dir.name)
    known = [combo_name(c) for c in VALID_COMBOS]
    combo_names.sort(key=lambda n: (known.index(n) if n in known else len(known), n))
    rows = aggregate_rows(reports, combo_names)
    write_aggregate_csv(Path(args.out), rows)
    print(f"wrote aggregate of {len(reports)} runs to {args.out}")


def cmd_run(args) -> None:
    overrides = {"seed": args.seed, "out": args.out}
    config = load_experiment_config(args.config, overrides)
    rows = run_experiment(config)
    if rows:
        columns = list(rows[0].keys())
        widths = [max(len(c), max(len(r[c]) for r in rows)) for c in columns]
        print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
        for row in rows:
            print("  ".join(row[c].ljust(w) for c, w in zip(columns, widths)))


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(
        prog="hieremb",
        description="Hierarchy-aware embedding learning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic taxonomy and dataset")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("split", help="write per-fold seen/unseen splits")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("sample-triplets", help="dump one epoch's triplets as JSON Lines")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--epoch-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_sample_triplets)

    p = sub.add_parser("train", help="train one fold and loss combination")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--taxonomy")
    p.add_argument("--dataset")
    p.add_argument("--split", required=True, help="split JSON for the fold")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--losses", required=True, help="e.g. PL+T")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="compute metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--taxonomy", help="defaults to the path recorded in the checkpoint")
    p.add_argument("--dataset", help="defaults to the path recorded in the checkpoint")
    p.add_argument("--split", help="defaults to the path recorded in the checkpoint")
    p.add_argument("--set", choices=["test", "prediction"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", help="also dump per-query ranks and NDCG as CSV")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate per-run metrics into a CSV")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("run", help="run the whole experiment pipeline")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.set_defaults(handler=cmd_run)

    args = parser.parse_args(argv)
    args.handler(args)


if __name__ == "__main__":
    main(sys.argv[1:])
