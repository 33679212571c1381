"""End-to-end command-line round trips on a scaled-down experiment."""
import contextlib
import io
import json
import subprocess
import sys

import pytest

from priorshift.benchmark import ExperimentConfig, worker_count
from priorshift.cli import main
from priorshift.data import GeneratorConfig, parse_tsv
from priorshift.model import EmotionClassifier, ModelConfig
from priorshift.training import TrainConfig

TINY_MODEL = dict(word_emb_dim=5, char_emb_dim=4, char_cnn_filter_widths=(1, 2),
                  char_cnn_maps_per_width=3, lstm_hidden_per_direction=3,
                  lstm_layers=1, context_lstm_hidden=3, context_lstm_layers=1,
                  mlp_hidden=7, max_turn_len=6, max_word_len=5)


def small_config():
    return ExperimentConfig(
        generator=GeneratorConfig(vocab_size=60, templates_per_class=3),
        model=ModelConfig(**TINY_MODEL),
        train=TrainConfig(max_epochs=2, patience=0, batch_size=16),
        n_train=60, n_dev=32, n_test=32, n_seeds=2, ensemble_members=2, seed=3)


def run_cli(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        rc = main(argv)
    return rc, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(small_config().to_json()), encoding="utf-8")
    return root, str(cfg)


@pytest.fixture(scope="module")
def synth_dir(work):
    root, cfg = work
    out = root / "synth"
    rc, stdout, _ = run_cli(["synth", "--config", cfg, "--out", str(out)])
    assert rc == 0
    return out, json.loads(stdout)


@pytest.fixture(scope="module")
def checkpoint(work):
    root, cfg = work
    path = root / "model.json"
    rc, stdout, _ = run_cli(["train", "--config", cfg, "--out", str(path)])
    assert rc == 0
    return path, json.loads(stdout)


@pytest.fixture(scope="module")
def compare_dir(work):
    root, cfg = work
    out = root / "compare"
    rc, stdout, _ = run_cli(["compare", "--config", cfg, "--out", str(out)])
    assert rc == 0
    return out, json.loads(stdout)


class TestSynth:
    def test_writes_splits_and_manifest(self, synth_dir):
        out, manifest = synth_dir
        for name in ("train", "dev", "test"):
            assert (out / f"{name}.tsv").exists()
        assert (out / "synth_manifest.json").exists()
        train = parse_tsv(out / "train.tsv")
        assert len(train) == 60
        assert manifest["seed"] == 3
        counts = manifest["class_counts"]["train"]
        assert sum(counts.values()) == 60
        # Train split follows the skewed training priors: half the corpus
        # is the others class.
        assert counts["others"] == 30

    def test_rerun_is_byte_identical(self, work, synth_dir):
        root, cfg = work
        first, _ = synth_dir
        again = root / "synth_again"
        rc, _, _ = run_cli(["synth", "--config", cfg, "--out", str(again)])
        assert rc == 0
        for name in ("train", "dev", "test"):
            assert (first / f"{name}.tsv").read_bytes() == \
                (again / f"{name}.tsv").read_bytes()

    def test_seed_override_changes_data(self, work, synth_dir):
        root, cfg = work
        first, _ = synth_dir
        other = root / "synth_seeded"
        rc, _, _ = run_cli(["synth", "--config", cfg, "--seed", "9",
                            "--out", str(other)])
        assert rc == 0
        assert (first / "train.tsv").read_bytes() != (other / "train.tsv").read_bytes()

    def test_missing_config_fails(self, tmp_path):
        rc, _, err = run_cli(["synth", "--config", str(tmp_path / "nope.json"),
                              "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "error:" in err


class TestTrainEval:
    def test_train_reports_run_summary(self, checkpoint):
        path, summary = checkpoint
        assert path.exists()
        assert summary["method"] == "none"
        assert summary["epochs_run"] == 2
        assert 1 <= summary["best_epoch"] <= 2

    def test_checkpoint_loads_and_predicts(self, checkpoint, synth_dir):
        path, _ = checkpoint
        out, _ = synth_dir
        model = EmotionClassifier.load(path)
        vectors = model.predict(parse_tsv(out / "dev.tsv")[:5])
        assert len(vectors) == 5

    def test_eval_baseline(self, work, checkpoint):
        root, cfg = work
        path, _ = checkpoint
        report_path = root / "eval.json"
        rc, stdout, _ = run_cli(["eval", "--config", cfg, "--checkpoint", str(path),
                                 "--out", str(report_path)])
        assert rc == 0
        payload = json.loads(stdout)
        assert payload == json.loads(report_path.read_text())
        assert payload["method"] == "baseline"
        assert payload["n_examples"] == 32
        assert 0.0 <= payload["accuracy"] <= 1.0

    def test_eval_threshold_method(self, work, checkpoint):
        root, cfg = work
        path, _ = checkpoint
        rc, stdout, _ = run_cli(["eval", "--config", cfg, "--checkpoint", str(path),
                                 "--method", "threshold"])
        assert rc == 0
        assert json.loads(stdout)["method"] == "threshold"

    def test_eval_explicit_tsv_and_all_classes(self, work, checkpoint, synth_dir):
        root, cfg = work
        path, _ = checkpoint
        out, _ = synth_dir
        rc, stdout, _ = run_cli(["eval", "--config", cfg, "--checkpoint", str(path),
                                 "--data", str(out / "test.tsv"), "--all-classes"])
        assert rc == 0
        payload = json.loads(stdout)
        assert payload["n_examples"] == 32
        # With every class pooled, micro F1 collapses to plain accuracy.
        assert payload["micro_f1_all_classes"] == payload["accuracy"]

    def test_eval_missing_checkpoint_fails(self, work):
        root, cfg = work
        rc, _, err = run_cli(["eval", "--config", cfg,
                              "--checkpoint", str(root / "missing.json")])
        assert rc == 1
        assert "error:" in err


class TestEnsemble:
    def test_oversample_ensemble(self, work):
        root, cfg = work
        out = root / "ensemble.json"
        rc, stdout, _ = run_cli(["ensemble", "--config", cfg, "--method",
                                 "oversample", "--out", str(out)])
        assert rc == 0
        payload = json.loads(stdout)
        assert payload["method"] == "oversample"
        assert payload["n_members"] == 2
        assert len(payload["member_val_f1"]) == 2


class TestCompare:
    ARTIFACTS = ["single_models.csv", "ensembles.csv", "distributions.csv", "runs.csv",
                 "history_baseline_run0.csv", "distributions.png",
                 "f1_comparison.png", "training_curve.png", "config.json",
                 "manifest.json"]

    def test_artifacts_written(self, compare_dir):
        out, _ = compare_dir
        for name in self.ARTIFACTS:
            assert (out / name).exists(), name
        for name in ("train", "dev", "test"):
            assert (out / "data" / f"{name}.tsv").exists()
        for method in ("none", "oversample", "undersample", "cost_sensitive"):
            assert (out / "checkpoints" / f"single_{method}_best.json").exists()

    def test_summary_lists_every_method(self, compare_dir):
        _, summary = compare_dir
        methods = [row["method"] for row in summary["single_models"]]
        assert methods == ["baseline", "oversample", "undersample", "threshold",
                           "cost_sensitive"]
        ensemble_methods = [row["method"] for row in summary["ensembles"]]
        assert ensemble_methods == methods + ["mixed"]

    def test_runs_csv_has_one_row_per_method_and_seed(self, compare_dir):
        out, _ = compare_dir
        rows = (out / "runs.csv").read_text().strip().split("\n")
        assert len(rows) == 1 + 5 * 2

    def test_config_json_round_trips(self, compare_dir):
        out, _ = compare_dir
        loaded = ExperimentConfig.from_json(
            json.loads((out / "config.json").read_text()))
        assert loaded.n_seeds == 2
        assert loaded.ensemble_members == 2
        assert loaded.train.max_epochs == 2

    def test_seeds_override(self, work):
        root, cfg = work
        out = root / "compare_one_seed"
        rc, _, _ = run_cli(["compare", "--config", cfg, "--seeds", "1",
                            "--out", str(out)])
        assert rc == 0
        rows = (out / "runs.csv").read_text().strip().split("\n")
        assert len(rows) == 1 + 5 * 1


class TestWorkerCount:
    def test_env_cap(self, monkeypatch):
        monkeypatch.setenv("PRIORSHIFT_THREADS", "1")
        assert worker_count(8) == 1
        monkeypatch.setenv("PRIORSHIFT_THREADS", "3")
        assert worker_count(8) == 3
        assert worker_count(2) == 2

    def test_defaults_to_cpu_count(self, monkeypatch):
        monkeypatch.delenv("PRIORSHIFT_THREADS", raising=False)
        assert worker_count(1) == 1
        assert worker_count(64) >= 1


def test_module_entry_point(work, tmp_path):
    root, cfg = work
    proc = subprocess.run(
        [sys.executable, "-m", "priorshift", "synth", "--config", cfg,
         "--out", str(tmp_path / "m")],
        capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "m" / "train.tsv").exists()
