import numpy as np
import pytest

from gradgate import cli
from gradgate.attacks import AttackConfig, AttackResult
from gradgate.config import ExperimentConfig, child_seed
from gradgate.data import load_dataset
from gradgate.gradfeat import load_features_csv, save_features_csv
from gradgate.nn import load_checkpoint

CONFIG_TEMPLATE = """
[experiment]
out_dir = {out}
master_seed = 11

[dataset]
dataset_count = 400
train_fraction = 0.5
val_fraction = 0.2

[model]
epochs = 2
batch_size = 32

[attacks]
attack_kinds = fgsm,semantic
attack_count = 40
cw_iterations = 10

[ood]
ood_kinds = uniform-noise
ood_count = 40

[detector]
detector_epochs = 30
"""


@pytest.fixture
def tiny_config(tmp_path):
    out = tmp_path / "out"
    path = tmp_path / "exp.ini"
    path.write_text(CONFIG_TEMPLATE.format(out=out))
    return path, out


class TestConfig:
    def test_defaults_round_trip_through_file(self, tiny_config):
        path, out = tiny_config
        cfg = ExperimentConfig.from_file(path)
        assert cfg.dataset_count == 400
        assert cfg.attack_kinds == ("fgsm", "semantic")
        assert cfg.epochs == 2
        assert cfg.momentum == 0.9  # untouched default

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[model]\nwarp_factor = 9\n")
        with pytest.raises(ValueError):
            ExperimentConfig.from_file(path)

    def test_digest_changes_with_content(self, tiny_config):
        path, _ = tiny_config
        a = ExperimentConfig.from_file(path)
        b = ExperimentConfig.from_file(path, overrides={"master_seed": 12})
        assert a.digest() != b.digest()

    def test_child_seed_is_stable_and_role_dependent(self):
        assert child_seed(7, "train") == child_seed(7, "train")
        assert child_seed(7, "train") != child_seed(7, "split")
        assert child_seed(7, "train") != child_seed(8, "train")

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ExperimentConfig.from_file(tmp_path / "nope.ini")


class TestTrainCommand:
    def test_writes_checkpoint_and_reloads(self, tiny_config):
        path, out = tiny_config
        assert cli.main(["train-classifier", "--config", str(path)]) == 0
        cfg = ExperimentConfig.from_file(path)
        ckpt = out / f"classifier-{cfg.digest()}.ggate"
        assert ckpt.exists()
        model = load_checkpoint(ckpt)
        assert model.num_classes == 10
        assert (out / f"history-{cfg.digest()}.txt").exists()

    def test_same_config_twice_identical_digest(self, tiny_config, tmp_path):
        path, out = tiny_config
        cli.main(["train-classifier", "--config", str(path)])
        cfg = ExperimentConfig.from_file(path)
        first = (out / f"classifier-{cfg.digest()}.ggate").read_bytes()
        other_out = tmp_path / "other"
        cli.main(["train-classifier", "--config", str(path), "--out", str(other_out)])
        cfg2 = ExperimentConfig.from_file(path, overrides={"out_dir": str(other_out)})
        second = (other_out / f"classifier-{cfg2.digest()}.ggate").read_bytes()
        assert first == second

    def test_missing_idx_paths_fail(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[dataset]\ndataset_kind = idx\n")
        assert cli.main(["train-classifier", "--config", str(path)]) == 1


class TestGenAnomalies:
    def test_one_file_per_source(self, tiny_config):
        path, out = tiny_config
        cli.main(["train-classifier", "--config", str(path)])
        cfg = ExperimentConfig.from_file(path)
        ckpt = out / f"classifier-{cfg.digest()}.ggate"
        assert cli.main(["gen-anomalies", "--config", str(path),
                         "--checkpoint", str(ckpt)]) == 0
        for tag in ("clean-test", "adv-fgsm", "adv-semantic", "ood-uniform-noise"):
            assert (out / f"{tag}-{cfg.digest()}.gdata").exists()
        ood = load_dataset(out / f"ood-uniform-noise-{cfg.digest()}.gdata")
        assert np.all(ood.labels == -1)
        adv = load_dataset(out / f"adv-fgsm-{cfg.digest()}.gdata")
        assert len(adv) == 40

    def test_budget_gate_rejects_violations(self):
        bad = AttackResult("fgsm", np.full((1, 1, 2, 2), 0.5),
                           np.array([True]), np.array([0.2]), np.array([0.4]))
        with pytest.raises(cli.PipelineError):
            cli._gate_attack("fgsm", bad, AttackConfig(kind="fgsm", epsilon=0.1))

    def test_range_gate_rejects_escapes(self):
        bad = AttackResult("semantic", np.full((1, 1, 2, 2), 1.5),
                           np.array([True]), np.array([0.5]), np.array([1.0]))
        with pytest.raises(cli.PipelineError):
            cli._gate_attack("semantic", bad, AttackConfig(kind="semantic"))


class TestExtractAndDetect:
    @pytest.fixture
    def pipeline(self, tiny_config):
        path, out = tiny_config
        cli.main(["train-classifier", "--config", str(path)])
        cfg = ExperimentConfig.from_file(path)
        ckpt = out / f"classifier-{cfg.digest()}.ggate"
        cli.main(["gen-anomalies", "--config", str(path), "--checkpoint", str(ckpt)])
        return path, out, cfg, ckpt

    def test_gradient_mode_has_eight_columns(self, pipeline):
        path, out, cfg, ckpt = pipeline
        ds = out / f"clean-test-{cfg.digest()}.gdata"
        assert cli.main(["extract-features", "--config", str(path), "--checkpoint",
                         str(ckpt), "--dataset", str(ds), "--mode", "gradient"]) == 0
        fs = load_features_csv(out / f"features-gradient-clean-test-{cfg.digest()}.csv")
        assert fs.dim == 8

    def test_activation_mode_has_layer_count_columns(self, pipeline):
        path, out, cfg, ckpt = pipeline
        ds = out / f"clean-test-{cfg.digest()}.gdata"
        cli.main(["extract-features", "--config", str(path), "--checkpoint", str(ckpt),
                  "--dataset", str(ds), "--mode", "activation"])
        fs = load_features_csv(out / f"features-activation-clean-test-{cfg.digest()}.csv")
        assert fs.dim == 4

    def test_feature_csv_round_trip_byte_equal(self, pipeline, tmp_path):
        path, out, cfg, ckpt = pipeline
        ds = out / f"clean-test-{cfg.digest()}.gdata"
        cli.main(["extract-features", "--config", str(path), "--checkpoint", str(ckpt),
                  "--dataset", str(ds), "--mode", "gradient"])
        csv_path = out / f"features-gradient-clean-test-{cfg.digest()}.csv"
        fs = load_features_csv(csv_path)
        again = tmp_path / "again.csv"
        save_features_csv(fs, again)
        assert csv_path.read_bytes() == again.read_bytes()

    def test_detect_reports_metrics(self, pipeline):
        path, out, cfg, ckpt = pipeline
        for tag in ("clean-test", "adv-semantic"):
            cli.main(["extract-features", "--config", str(path), "--checkpoint",
                      str(ckpt), "--dataset", str(out / f"{tag}-{cfg.digest()}.gdata"),
                      "--mode", "gradient"])
        normal = out / f"features-gradient-clean-test-{cfg.digest()}.csv"
        anom = out / f"features-gradient-adv-semantic-{cfg.digest()}.csv"
        assert cli.main(["detect", "--config", str(path), "--normal", str(normal),
                         "--anomalous", str(anom)]) == 0
        report = (out / f"report-{cfg.digest()}.kv").read_text()
        for metric in ("accuracy", "auroc", "aupr"):
            line = [l for l in report.splitlines() if metric in l][0]
            value = float(line.split("=")[1])
            assert 0.0 <= value <= 1.0

    def test_detect_rejects_empty_anomalous(self, pipeline, tmp_path):
        path, out, cfg, ckpt = pipeline
        cli.main(["extract-features", "--config", str(path), "--checkpoint", str(ckpt),
                  "--dataset", str(out / f"clean-test-{cfg.digest()}.gdata"),
                  "--mode", "gradient"])
        normal = out / f"features-gradient-clean-test-{cfg.digest()}.csv"
        empty = tmp_path / "empty.csv"
        empty.write_text("sample_id,anomaly_label,source_tag,f0\n")
        assert cli.main(["detect", "--config", str(path), "--normal", str(normal),
                         "--anomalous", str(empty)]) == 1


class TestRunExperiment:
    def test_report_has_one_row_per_source_and_method(self, tiny_config):
        path, out = tiny_config
        assert cli.main(["run-experiment", "--config", str(path)]) == 0
        cfg = ExperimentConfig.from_file(path)
        report = (out / f"report-{cfg.digest()}.kv").read_text()
        for source in ("adv-fgsm", "adv-semantic", "ood-uniform-noise"):
            for method in ("gradient", "activation", "msp"):
                assert f"row.{source}.{method}.auroc=" in report
        assert (out / f"report-{cfg.digest()}.txt").exists()

    def test_second_run_reuses_artifacts(self, tiny_config):
        path, out = tiny_config
        cli.main(["run-experiment", "--config", str(path)])
        cfg = ExperimentConfig.from_file(path)
        ckpt = out / f"classifier-{cfg.digest()}.ggate"
        stamp = ckpt.stat().st_mtime_ns
        assert cli.main(["run-experiment", "--config", str(path)]) == 0
        assert ckpt.stat().st_mtime_ns == stamp  # untouched: loaded, not retrained

    def test_two_directories_same_seed_identical_reports(self, tiny_config, tmp_path):
        path, out = tiny_config
        cli.main(["run-experiment", "--config", str(path)])
        cfg = ExperimentConfig.from_file(path)
        other = tmp_path / "replica"
        cli.main(["run-experiment", "--config", str(path), "--out", str(other)])
        cfg2 = ExperimentConfig.from_file(path, overrides={"out_dir": str(other)})
        assert cfg.digest() == cfg2.digest()  # out_dir is not part of identity
        a = (out / f"report-{cfg.digest()}.kv").read_bytes()
        b = (other / f"report-{cfg2.digest()}.kv").read_bytes()
        assert a == b


class TestCompareNorms:
    def test_blocks_per_layer_per_mode(self, tiny_config):
        path, out = tiny_config
        cli.main(["train-classifier", "--config", str(path)])
        cfg = ExperimentConfig.from_file(path)
        ckpt = out / f"classifier-{cfg.digest()}.ggate"
        cli.main(["gen-anomalies", "--config", str(path), "--checkpoint", str(ckpt)])
        datasets = ",".join(str(out / f"{t}-{cfg.digest()}.gdata")
                            for t in ("clean-test", "adv-fgsm"))
        assert cli.main(["compare-norms", "--config", str(path), "--checkpoint",
                         str(ckpt), "--datasets", datasets]) == 0
        text = (out / f"norms-{cfg.digest()}.txt").read_text()
        assert text.count("== gradient /") == 8   # one block per parameter set
        assert text.count("== activation /") == 4  # one block per layer
        assert "clean-test" in text and "adv-fgsm" in text

    def test_empty_dataset_list_fails(self, tiny_config):
        path, out = tiny_config
        cli.main(["train-classifier", "--config", str(path)])
        cfg = ExperimentConfig.from_file(path)
        ckpt = out / f"classifier-{cfg.digest()}.ggate"
        assert cli.main(["compare-norms", "--config", str(path), "--checkpoint",
                         str(ckpt), "--datasets", str(out / "missing.gdata")]) == 1
