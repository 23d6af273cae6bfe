import json
from pathlib import Path

import pytest

from adapterlab.cli import CliError, load_run_config, main, parse_overrides

TINY = {
    "n_per_language": 8,
    "languages": 3,
    "split_fractions": [0.6, 0.2, 0.2],
    "d_model": 16,
    "n_layers_encoder": 2,
    "n_layers_decoder": 1,
    "n_heads": 2,
    "d_ff": 32,
    "max_seq_len": 220,
    "adapter_dim": 4,
    "batch_size": 6,
    "max_epochs": 1,
    "max_summary_len": 4,
    "pretrain_steps": 4,
    "probe_samples": 30,
}


def write_config(tmp_path, **extra) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps({**TINY, **extra}))
    return path


class TestRunConfig:
    def test_defaults_plus_override(self):
        config = load_run_config(None, {"seed": 9})
        assert config["seed"] == 9
        assert config["adapter_dim"] == 16

    def test_unknown_keys_all_reported(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"sed": 1, "adapter_dmi": 2}))
        with pytest.raises(CliError) as exc:
            load_run_config(path, {"tpyo": 3})
        msg = str(exc.value)
        assert "sed" in msg and "adapter_dmi" in msg and "tpyo" in msg

    def test_parse_overrides_json_values(self):
        out = parse_overrides(["seed=3", "task=search", "language_tags=true"])
        assert out == {"seed": 3, "task": "search", "language_tags": True}

    def test_parse_overrides_rejects_bad_pair(self):
        with pytest.raises(CliError):
            parse_overrides(["seed"])


class TestGenerate:
    def test_writes_corpus_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "data"
        rc = main(["generate", "--languages", "4", "--n", "500", "--seed", "1",
                   "--out", str(out)])
        assert rc == 0
        lines = (out / "corpus.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2000
        assert (out / "splits.json").exists()
        assert (out / "summary.md").exists() and (out / "summary.json").exists()

    def test_same_seed_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["generate", "--languages", "3", "--n", "12", "--seed", "7",
                     "--out", str(a)]) == 0
        assert main(["generate", "--languages", "3", "--n", "12", "--seed", "7",
                     "--out", str(b)]) == 0
        assert (a / "corpus.jsonl").read_bytes() == (b / "corpus.jsonl").read_bytes()
        assert (a / "splits.json").read_bytes() == (b / "splits.json").read_bytes()

    def test_imbalance_ratio(self, tmp_path):
        out = tmp_path / "imb"
        assert main(["generate", "--languages", "4", "--n", "40", "--imbalance", "10",
                     "--seed", "0", "--out", str(out)]) == 0
        counts = json.loads((out / "summary.json").read_text())["counts"]
        totals = [sum(v.values()) for v in counts.values()]
        assert max(totals) == 40 and min(totals) == 4

    def test_refuses_overwrite_without_force(self, tmp_path, capsys):
        out = tmp_path / "data"
        assert main(["generate", "--languages", "3", "--n", "6", "--seed", "0",
                     "--out", str(out)]) == 0
        assert main(["generate", "--languages", "3", "--n", "6", "--seed", "0",
                     "--out", str(out)]) == 1
        assert "force" in capsys.readouterr().err
        assert main(["generate", "--languages", "3", "--n", "6", "--seed", "0",
                     "--out", str(out), "--force"]) == 0

    def test_unknown_language_name(self, tmp_path, capsys):
        rc = main(["generate", "--languages", "klingon", "--n", "6", "--seed", "0",
                   "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "klingon" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> pretrain once; downstream commands reuse the artifacts."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    assert main(["generate", "--languages", "3", "--n", "8", "--seed", "3",
                 "--out", str(data)]) == 0
    config = root / "config.json"
    config.write_text(json.dumps({**TINY, "corpus": str(data / "corpus.jsonl"),
                                  "run_root": str(root / "runs")}))
    pre_dir = root / "pretrained"
    assert main(["pretrain", "--config", str(config), "--seed", "0",
                 "--out", str(pre_dir)]) == 0
    full = json.loads(config.read_text())
    full["base_checkpoint"] = str(pre_dir / "model.ckpt")
    full["vocab"] = str(pre_dir / "vocab.json")
    config.write_text(json.dumps(full))
    return root, config, pre_dir


class TestPipeline:
    def test_pretrain_wrote_artifacts(self, pipeline):
        _, _, pre_dir = pipeline
        assert (pre_dir / "model.ckpt").exists()
        assert (pre_dir / "vocab.json").exists()
        record = json.loads((pre_dir / "record.json").read_text())
        assert record["steps"] == TINY["pretrain_steps"]

    def test_finetune_and_rerun_reproduces_metrics(self, pipeline):
        root, config, _ = pipeline
        assert main(["finetune", "--config", str(config), "--set", "seed=5"]) == 0
        run_dirs = sorted((root / "runs").glob("finetune-*"))
        assert len(run_dirs) == 1
        first = json.loads((run_dirs[0] / "record.json").read_text())
        assert main(["finetune", "--config", str(config), "--set", "seed=5"]) == 0
        second = json.loads((run_dirs[0] / "record.json").read_text())
        assert first["metrics"] == second["metrics"]
        assert first["config_hash"] == second["config_hash"]
        assert (run_dirs[0] / "adapters.ckpt").exists()
        assert (run_dirs[0] / "record.md").exists()

    def test_eval_command(self, pipeline, capsys):
        root, config, pre_dir = pipeline
        rc = main(["eval", "--config", str(config), "--checkpoint",
                   str(pre_dir / "model.ckpt"), "--task", "summarization",
                   "--languages", "pylite,jslite", "--out", str(root / "eval")])
        assert rc == 0
        payload = json.loads((root / "eval" / "eval-summarization.json").read_text())
        assert set(payload["per_language"]) == {"pylite", "jslite"}

    def test_eval_empty_languages_errors(self, pipeline, capsys):
        _, config, pre_dir = pipeline
        rc = main(["eval", "--config", str(config), "--checkpoint",
                   str(pre_dir / "model.ckpt"), "--languages", ""])
        assert rc == 1

    def test_eval_missing_checkpoint_reports_path(self, pipeline, capsys):
        root, config, _ = pipeline
        rc = main(["eval", "--config", str(config), "--checkpoint",
                   str(root / "nope.ckpt"), "--languages", "pylite"])
        assert rc == 1
        assert "nope.ckpt" in capsys.readouterr().err

    def test_probe_command_curve_lengths(self, pipeline):
        root, config, pre_dir = pipeline
        out = root / "probe"
        rc = main(["probe", "--config", str(config), "--checkpoint",
                   str(pre_dir / "model.ckpt"), "--tasks", "LEN,TYP", "--seed", "0",
                   "--out", str(out)])
        assert rc == 0
        payload = json.loads((out / "probe.json").read_text())
        assert set(payload["tasks"]) == {"LEN", "TYP"}
        # n_layers_encoder + 1 points per curve
        assert len(payload["tasks"]["LEN"]) == TINY["n_layers_encoder"] + 1
        csv = (out / "probe_LEN.csv").read_text().strip().splitlines()
        assert csv[0] == "layer,accuracy"
        assert len(csv) == TINY["n_layers_encoder"] + 2

    def test_probe_unknown_task(self, pipeline, capsys):
        _, config, pre_dir = pipeline
        rc = main(["probe", "--config", str(config), "--checkpoint",
                   str(pre_dir / "model.ckpt"), "--tasks", "LEN,XYZ"])
        assert rc == 1

    def test_sweep_dim_rows(self, pipeline):
        root, config, _ = pipeline
        rc = main(["sweep-dim", "--config", str(config), "--dims", "2,4"])
        assert rc == 0
        sweep_dirs = sorted((root / "runs").glob("sweep-*"))
        payload = json.loads((sweep_dirs[0] / "sweep.json").read_text())
        assert set(payload["dims"]) == {"2", "4"}
        md = (sweep_dirs[0] / "sweep.md").read_text()
        assert "dim=2" in md and "dim=4" in md

    def test_lockfile_blocks_concurrent_runs(self, pipeline, capsys):
        root, config, _ = pipeline
        run_dirs = sorted((root / "runs").glob("finetune-*"))
        lock = run_dirs[0] / ".lock"
        lock.write_text("held")
        try:
            rc = main(["finetune", "--config", str(config), "--set", "seed=5"])
            assert rc == 1
            assert "locked" in capsys.readouterr().err
        finally:
            lock.unlink()

    def test_finetune_unknown_config_key(self, pipeline, capsys):
        _, config, _ = pipeline
        rc = main(["finetune", "--config", str(config), "--set", "learning=1"])
        assert rc == 1
        assert "learning" in capsys.readouterr().err
