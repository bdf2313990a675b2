import csv
import json

import numpy as np
import pytest

from hieremb.cli import (
    VALID_COMBOS,
    ExperimentConfig,
    config_from_values,
    evaluate_model,
    load_experiment_config,
    main,
    parse_branching,
    parse_int_range,
    read_config_file,
    run_experiment,
)
from hieremb.dataset import save_dataset
from hieremb.losses import LossConfig
from hieremb.model import ModelConfig, fit
from hieremb.synthdata import SynthConfig, generate
from hieremb.taxonomy import parse_taxonomy, save_taxonomy

from conftest import make_samples, t0_document

TINY_SYNTH = {
    "synth_depth": "3",
    "synth_branching": "2-2,2-3",
    "synth_samples_per_leaf": "60-70",
    "synth_feature_dim": "8",
    "synth_offset_scale": "2.0",
    "synth_decay": "0.7",
    "synth_noise": "0.3",
}


def write_config(path, extra=None):
    values = dict(TINY_SYNTH)
    values.update(
        {"k_folds": "2", "epochs": "2", "seed": "0", "combos": "L,PL+T",
         "hidden_dim": "16", "embedding_dim": "8"}
    )
    values.update(extra or {})
    path.write_text("# test config\n" + "\n".join(f"{k} = {v}" for k, v in values.items()) + "\n")
    return path


class TestConfigParsing:
    def test_read_config_file(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("a = 1\n# comment\nb = two  # trailing\n\nc=3\n")
        assert read_config_file(path) == {"a": "1", "b": "two", "c": "3"}

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("just a line\n")
        with pytest.raises(ValueError, match="key = value"):
            read_config_file(path)

    def test_ranges(self):
        assert parse_int_range("3-4") == (3, 4)
        assert parse_int_range("7") == (7, 7)
        assert parse_branching("3-4,2-2") == ((3, 4), (2, 2))

    def test_defaults_and_overrides(self, tmp_path):
        path = write_config(tmp_path / "exp.cfg")
        config = load_experiment_config(str(path), {"seed": 9})
        assert config.seed == 9
        assert config.k_folds == 2
        assert config.synth.branching == ((2, 2), (2, 3))
        assert config.synth.seed == 9  # synth seed follows the effective base seed
        assert [c for c in config.combos] == [frozenset({"L"}), frozenset({"PL", "T"})]
        pinned = load_experiment_config(str(path), {"seed": 9, "synth_seed": 4})
        assert pinned.synth.seed == 4

    def test_invalid_combo_rejected(self):
        with pytest.raises(ValueError, match="six supported"):
            config_from_values({"combos": "B"})
        with pytest.raises(ValueError, match="six supported"):
            ExperimentConfig(combos=(frozenset({"B", "T"}),))


@pytest.fixture(scope="module", name="trained")
def fixture_trained():
    config = SynthConfig(
        depth=3, branching=((2, 2), (2, 3)), samples_per_leaf=(60, 70),
        feature_dim=8, offset_scale=2.0, decay=0.7, noise=0.3, seed=0,
    )
    tax, samples = generate(config)
    from hieremb.datasplit import make_fold_splits

    split = make_fold_splits(tax, samples, k_folds=2, seed=0)[0]
    model_config = ModelConfig(input_dim=8, hidden_dim=16, embedding_dim=8)
    models = {}
    for combo in (frozenset({"L"}), frozenset({"PL", "T"})):
        models[combo], _ = fit(
            samples, tax, split, LossConfig(active=combo), model_config, 2, seed=0
        )
    return tax, samples, split, models


class TestEvaluateModel:
    def test_test_set_report(self, trained):
        tax, samples, split, models = trained
        report = evaluate_model(models[frozenset({"PL", "T"})], tax, samples, split, "test")
        assert report.leaf_f1 is not None
        assert report.leaf_rp_at_5 is not None
        assert 0.0 <= report.mnr < 1.0
        assert 0.0 <= report.ndcg_sum <= 1.0
        assert report.acc_blind is None

    def test_prediction_set_report_l_only_has_no_acc_aware(self, trained):
        tax, samples, split, models = trained
        report = evaluate_model(models[frozenset({"L"})], tax, samples, split, "prediction")
        assert report.acc_blind is not None
        assert report.acc_aware is None
        assert report.ratio_blind_aware is None
        assert report.mnr is None

    def test_prediction_set_report_pl_has_acc_aware(self, trained):
        tax, samples, split, models = trained
        report = evaluate_model(
            models[frozenset({"PL", "T"})], tax, samples, split, "prediction"
        )
        assert report.acc_aware is not None
        if report.acc_aware > 0:
            assert report.ratio_blind_aware == pytest.approx(
                report.acc_blind / report.acc_aware
            )


class TestRunExperiment:
    def test_layout_and_aggregate(self, tmp_path):
        config = load_experiment_config(
            str(write_config(tmp_path / "exp.cfg")), {"out": str(tmp_path / "runs")}
        )
        rows = run_experiment(config)
        out = tmp_path / "runs"
        for fold in (0, 1):
            assert (out / f"fold_{fold}" / "split.json").exists()
            for combo in ("L", "PL+T"):
                run_dir = out / f"fold_{fold}" / combo
                for name in ("checkpoint.json", "log.csv", "test.json", "prediction.json"):
                    assert (run_dir / name).exists()
        assert (out / "aggregate.csv").exists()
        assert [r["combo"] for r in rows] == ["L", "PL+T"]
        l_row = rows[0]
        assert l_row["pred_acc_aware"] == "-"  # undefined without PL heads
        assert l_row["pred_ratio"] == "-"
        pl_row = rows[1]
        assert pl_row["pred_acc_aware"] != "-"
        # cells look like "12.3 (0.4)"
        assert "(" in l_row["test_leaf_f1"]

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg_path = write_config(tmp_path / "exp.cfg", {"epochs": "1", "combos": "L"})
        config = load_experiment_config(str(cfg_path), {"out": str(tmp_path / "runs")})
        run_experiment(config)
        first = (tmp_path / "runs" / "aggregate.csv").read_bytes()
        run_experiment(config)
        second = (tmp_path / "runs" / "aggregate.csv").read_bytes()
        assert first == second


class TestSubcommandPipeline:
    def test_t0_triplet_dump(self, tmp_path):
        tax = parse_taxonomy(t0_document())
        samples = make_samples(tax, {"a1": 10, "a2": 10, "b1": 10}, dim=4)
        save_taxonomy(tmp_path / "taxonomy.json", tax)
        save_dataset(tmp_path / "dataset.jsonl", samples)
        split_payload = {
            "fold": 0,
            "seen": ["a1", "a2", "b1"],
            "unseen": [],
            "partition": {s.id: "train" for s in samples},
        }
        (tmp_path / "split.json").write_text(json.dumps(split_payload))
        out = tmp_path / "triplets.jsonl"
        main([
            "sample-triplets",
            "--taxonomy", str(tmp_path / "taxonomy.json"),
            "--dataset", str(tmp_path / "dataset.jsonl"),
            "--split", str(tmp_path / "split.json"),
            "--epoch-seed", "0",
            "--out", str(out),
        ])
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(lines) == 5
        assert {tuple((l["anchor_node_name"], l["positive_node_name"], l["negative_node_name"])) for l in lines} == {
            ("a1", "a2", "B"),
            ("a2", "a1", "B"),
            ("b1", "b1", "A"),
            ("a1", "a1", "a2"),
            ("a2", "a2", "a1"),
        }
        for line in lines:
            assert {"anchor", "positive", "negative"} <= set(line)

    def test_stage_pipeline_matches_run_experiment(self, tmp_path):
        cfg_path = write_config(tmp_path / "exp.cfg", {"combos": "PL+T"})
        # one-shot driver
        config = load_experiment_config(str(cfg_path), {"out": str(tmp_path / "auto")})
        run_experiment(config)

        # staged pipeline with the same seeds
        data_dir = tmp_path / "data"
        main(["gen-data", "--config", str(cfg_path), "--out", str(data_dir)])
        splits_dir = tmp_path / "splits"
        main([
            "split",
            "--taxonomy", str(data_dir / "taxonomy.json"),
            "--dataset", str(data_dir / "dataset.jsonl"),
            "--folds", "2", "--seed", "0",
            "--out", str(splits_dir),
        ])
        run_dir = tmp_path / "manual" / "fold_0" / "PL+T"
        main([
            "train",
            "--config", str(cfg_path),
            "--taxonomy", str(data_dir / "taxonomy.json"),
            "--dataset", str(data_dir / "dataset.jsonl"),
            "--split", str(splits_dir / "split_fold_0.json"),
            "--fold", "0", "--losses", "PL+T",
            "--out", str(run_dir),
        ])
        for subset in ("test", "prediction"):
            main([
                "evaluate",
                "--checkpoint", str(run_dir / "checkpoint.json"),
                "--taxonomy", str(data_dir / "taxonomy.json"),
                "--dataset", str(data_dir / "dataset.jsonl"),
                "--split", str(splits_dir / "split_fold_0.json"),
                "--set", subset,
                "--out", str(run_dir / f"{subset}.json"),
            ])
            auto = (tmp_path / "auto" / "fold_0" / "PL+T" / f"{subset}.json").read_bytes()
            manual = (run_dir / f"{subset}.json").read_bytes()
            assert auto == manual

        report_out = tmp_path / "manual_aggregate.csv"
        main(["report", "--runs", str(tmp_path / "manual"), "--out", str(report_out)])
        with open(report_out) as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["combo"] == "PL+T"

        # evaluate can fall back to the paths echoed in the checkpoint and
        # dump per-query diagnostics
        diag = tmp_path / "diag.csv"
        main([
            "evaluate",
            "--checkpoint", str(run_dir / "checkpoint.json"),
            "--set", "test",
            "--out", str(tmp_path / "fallback_test.json"),
            "--diagnostics", str(diag),
        ])
        fallback = json.loads((tmp_path / "fallback_test.json").read_text())
        direct = json.loads((run_dir / "test.json").read_text())
        assert fallback == direct
        with open(diag) as fh:
            diag_rows = list(csv.DictReader(fh))
        assert {"query", "ndcg_sum", "ndcg_max"} <= set(diag_rows[0])
        assert all(r["query"] for r in diag_rows)

    def test_split_files_round_trip(self, tmp_path):
        config = SynthConfig(
            depth=2, branching=((4, 4),), samples_per_leaf=(12, 15),
            feature_dim=4, seed=2,
        )
        tax, samples = generate(config)
        save_taxonomy(tmp_path / "taxonomy.json", tax)
        save_dataset(tmp_path / "dataset.jsonl", samples)
        main([
            "split",
            "--taxonomy", str(tmp_path / "taxonomy.json"),
            "--dataset", str(tmp_path / "dataset.jsonl"),
            "--folds", "2", "--seed", "1",
            "--out", str(tmp_path / "splits"),
        ])
        for fold in (0, 1):
            payload = json.loads((tmp_path / "splits" / f"split_fold_{fold}.json").read_text())
            assert payload["fold"] == fold
            assert set(payload["partition"].values()) <= {
                "train", "valid", "test", "prediction"
            }
