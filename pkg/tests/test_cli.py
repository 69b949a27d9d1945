"""End-to-end tests of the command-line entry point on a tiny run document."""

import pytest
import yaml

from main import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, build_parser, run


def _train(config_file, *extra):
    return run(["train", "--config", str(config_file), *extra])


class TestTrainCommand:

    def test_writes_run_directory(self, tiny_config_file, run_root):
        assert _train(tiny_config_file) == EXIT_OK
        run_dir = run_root / "tiny"
        for name in ("config.yaml", "metrics.csv", "cht.log", "ckpt_2", "ckpt_3"):
            assert (run_dir / name).exists(), name
        assert len((run_dir / "metrics.csv").read_text().splitlines()) == 4

    def test_override_recorded_in_snapshot(self, tiny_config_file, run_root):
        assert _train(tiny_config_file, "--set", "train.T=3") == EXIT_OK
        snapshot = yaml.safe_load((run_root / "tiny" / "config.yaml").read_text())
        assert snapshot["train"]["T"] == 3
        header = (run_root / "tiny" / "metrics.csv").read_text().splitlines()[0]
        assert "J_cell_2_2" in header

    def test_same_config_same_metrics(self, tiny_config_file, run_root):
        assert _train(tiny_config_file, "--set", "run.name=a") == EXIT_OK
        assert _train(tiny_config_file, "--set", "run.name=b") == EXIT_OK
        assert (run_root / "a" / "metrics.csv").read_text() == (run_root / "b" / "metrics.csv").read_text()

    def test_unknown_key(self, tiny_config_file, run_root):
        assert _train(tiny_config_file, "--set", "train.bogus=1") == EXIT_CONFIG

    def test_missing_config(self, tmp_path, run_root):
        assert run(["train", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG

    def test_refuses_non_empty_run_dir(self, tiny_config_file, run_root):
        assert _train(tiny_config_file) == EXIT_OK
        assert _train(tiny_config_file) == EXIT_CONFIG

    def test_resume(self, tiny_config_file, run_root):
        assert _train(tiny_config_file) == EXIT_OK
        assert _train(tiny_config_file, "--resume", "--set", "train.total_steps=4") == EXIT_OK
        rows = (run_root / "tiny" / "metrics.csv").read_text().splitlines()
        assert [row.split(",")[0] for row in rows[1:]] == ["1", "2", "3", "4"]
        assert (run_root / "tiny" / "ckpt_4").is_dir()


class TestCheckpointCommands:

    def test_eval(self, tiny_config_file, run_root):
        assert _train(tiny_config_file) == EXIT_OK
        checkpoint = run_root / "tiny" / "ckpt_3"
        out = run_root / "eval"
        assert run(["eval", "--checkpoint", str(checkpoint), "--T-test", "3", "--out", str(out)]) == EXIT_OK
        for name in ("metrics_task_incremental.csv", "metrics_class_incremental.csv",
                     "task_incremental.svg", "class_incremental.svg"):
            assert (out / name).exists(), name
        # rows for theta_0..theta_2
        assert len((out / "metrics_task_incremental.csv").read_text().splitlines()) == 1 + 6

    def test_eval_help_names_table_files(self, capsys):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["eval", "--help"])
        assert "metrics_<protocol>.csv" in capsys.readouterr().out

    def test_eval_single_protocol(self, tiny_config_file, run_root):
        assert _train(tiny_config_file) == EXIT_OK
        checkpoint = run_root / "tiny" / "ckpt_3"
        assert run(["eval", "--checkpoint", str(checkpoint), "--protocol", "class_incremental"]) == EXIT_OK
        assert (run_root / "tiny" / "metrics_class_incremental.csv").exists()
        assert not (run_root / "tiny" / "metrics_task_incremental.csv").exists()

    def test_missing_checkpoint(self, tiny_config_file, run_root):
        code = run(["eval", "--checkpoint", str(run_root / "ckpt_9"), "--config", str(tiny_config_file)])
        assert code == EXIT_RUNTIME

    def test_checkpoint_without_config(self, tmp_path, run_root):
        assert run(["eval", "--checkpoint", str(tmp_path / "ckpt_1")]) == EXIT_CONFIG

    def test_fingerprint_mismatch(self, tiny_config_file, run_root):
        assert _train(tiny_config_file) == EXIT_OK
        checkpoint = run_root / "tiny" / "ckpt_3"
        code = run(["eval", "--checkpoint", str(checkpoint), "--set", "arch.channels=3"])
        assert code == EXIT_RUNTIME

    def test_exports(self, tiny_config_file, run_root):
        assert _train(tiny_config_file) == EXIT_OK
        checkpoint = str(run_root / "tiny" / "ckpt_3")
        assert run(["export-embeddings", "--checkpoint", checkpoint]) == EXIT_OK
        assert (run_root / "tiny" / "embeddings.csv").exists()
        assert run(["export-weights", "--checkpoint", checkpoint, "--T-test", "3"]) == EXIT_OK
        for t in range(3):
            assert (run_root / "tiny" / "weights" / f"theta_{t}" / "params.bin").exists()


class TestOtherCommands:

    def test_check(self, capsys, run_root):
        assert run(["check", "maml"]) == EXIT_OK
        assert "PASS" in capsys.readouterr().out

    def test_baseline_constpn(self, tiny_config_file, run_root):
        assert run(["baseline-constpn", "--config", str(tiny_config_file)]) == EXIT_OK
        run_dir = run_root / "tiny_constpn"
        assert (run_dir / "ckpt_2").is_dir()
        assert (run_dir / "metrics_class_incremental.csv").exists()

    def test_baseline_merged(self, tiny_config_file, run_root):
        assert run(["baseline-merged", "--config", str(tiny_config_file)]) == EXIT_OK
        run_dir = run_root / "tiny_merged"
        assert (run_dir / "metrics_task_incremental.csv").exists()
        assert (run_dir / "ckpt_3").is_dir()
