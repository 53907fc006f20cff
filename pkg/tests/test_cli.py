import numpy as np
import pandas as pd
import pytest
import torch
from PIL import Image

from checkpoint import CHECKPOINT_NAME
from config import SEED_ENV_VAR
from corruptions import CorruptionKind
from main import main
from report import TABLE_KINDS, write_clean_report
from trainer import LOG_NAME, evaluate_robustness

TINY = """
[synth]
count = 10
size = 32
seed = 0

[train]
steps = 2
batch_size = 2
crop = 32
eval_every = 0
log_every = 1
"""


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


@pytest.fixture
def dataset(tmp_path, tiny_config):
    root = tmp_path / "data"
    assert main(["synth", "--config", str(tiny_config), "--out", str(root)]) == 0
    return root


@pytest.fixture
def trained(tmp_path, tiny_config, dataset):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(out)]) == 0
    return out


class TestSynth:
    def test_layout_and_hash(self, tmp_path, tiny_config, dataset, capsys):
        for name in ("images", "masks", "splits.txt", "MANIFEST.sha", "resolved_config.toml", "run.log"):
            assert (dataset / name).exists()
        other = tmp_path / "again"
        capsys.readouterr()
        assert main(["synth", "--config", str(tiny_config), "--out", str(other)]) == 0
        printed = capsys.readouterr().out.strip()
        assert printed == (dataset / "MANIFEST.sha").read_text().strip()
        assert (other / "MANIFEST.sha").read_text() == (dataset / "MANIFEST.sha").read_text()

    def test_zero_count(self, tmp_path, capsys):
        config = tmp_path / "zero.toml"
        config.write_text("[synth]\ncount = 0\n")
        out = tmp_path / "none"
        assert main(["synth", "--config", str(config), "--out", str(out)]) == 1
        assert "error:" in capsys.readouterr().err
        assert not out.exists()

    def test_unknown_key_is_usage_error(self, tmp_path, capsys):
        config = tmp_path / "bad.toml"
        config.write_text("[synth]\ncolour = 1\n")
        assert main(["synth", "--config", str(config), "--out", str(tmp_path / "x")]) == 1
        assert "colour" in capsys.readouterr().err


class TestTrain:
    def test_checkpoint_and_log(self, trained):
        assert (trained / CHECKPOINT_NAME).exists()
        assert (trained / "resolved_config.toml").exists()
        assert len(pd.read_csv(trained / LOG_NAME)) == 2

    def test_noise_ablation_restricts_histogram(self, tmp_path, tiny_config, dataset):
        out = tmp_path / "noise"
        assert main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(out),
                     "--ablation", "noise", "--steps", "4"]) == 0
        log = pd.read_csv(out / LOG_NAME)
        assert len(log) == 4
        for histogram in log["action_histogram"]:
            counts = [int(c) for c in histogram.split()]
            assert sum(counts) == 2
            assert sum(counts[9:]) == 0

    def test_modes_give_different_checkpoints(self, tmp_path, tiny_config, dataset, trained):
        out = tmp_path / "joint"
        assert main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(out),
                     "--mode", "joint"]) == 0
        assert (out / CHECKPOINT_NAME).read_bytes() != (trained / CHECKPOINT_NAME).read_bytes()

    def test_missing_dataset(self, tmp_path, tiny_config, capsys):
        code = main(["train", "--config", str(tiny_config), "--data", str(tmp_path / "nowhere"),
                     "--out", str(tmp_path / "run")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_random_ablation_conflicts_with_adversarial(self, tmp_path, tiny_config, dataset):
        assert main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(tmp_path / "r"),
                     "--ablation", "random", "--mode", "adversarial"]) == 1

    def test_bad_flag_exits_with_usage_code(self, capsys):
        with pytest.raises(SystemExit) as exit_info:
            main(["train", "--mode", "greedy"])
        assert exit_info.value.code == 1
        assert "error:" in capsys.readouterr().err


class TestEval:
    def test_full_grid(self, tmp_path, trained, dataset):
        out = tmp_path / "eval"
        assert main(["eval", "--checkpoint", str(trained / CHECKPOINT_NAME), "--data", str(dataset),
                     "--out", str(out)]) == 0
        data = pd.read_csv(out / "robustness.csv")
        assert len(data) == 31
        assert (data["kind"] == "clean").sum() == 1
        markdown = (out / "robustness.md").read_text()
        for kind in TABLE_KINDS:
            assert f"{kind.value} IOU" in markdown
        assert "impulse_noise (extra) IOU" in markdown
        assert (out / "robustness.html").exists()
        assert (out / "clean.csv").exists()

    def test_clean_only(self, tmp_path, trained, dataset):
        out = tmp_path / "clean"
        assert main(["eval", "--checkpoint", str(trained / CHECKPOINT_NAME), "--data", str(dataset),
                     "--out", str(out), "--clean-only"]) == 0
        assert (out / "clean.csv").exists()
        assert not (out / "robustness.csv").exists()

    def test_architecture_mismatch(self, tmp_path, trained, dataset, capsys):
        path = trained / CHECKPOINT_NAME
        payload = torch.load(path, weights_only=True)
        payload["arch_fingerprint"] = "0" * 64
        tampered = tmp_path / "tampered.pt"
        torch.save(payload, tampered)
        code = main(["eval", "--checkpoint", str(tampered), "--data", str(dataset), "--out", str(tmp_path / "e")])
        assert code == 2
        assert "fingerprint" in capsys.readouterr().err

    def test_workers_cap_torch_threads(self, tmp_path, trained, dataset, monkeypatch):
        calls = []
        monkeypatch.setattr(torch, "set_num_threads", calls.append)
        assert main(["eval", "--checkpoint", str(trained / CHECKPOINT_NAME), "--data", str(dataset),
                     "--out", str(tmp_path / "w"), "--clean-only", "--workers", "1"]) == 0
        assert calls == [1]
        assert (tmp_path / "w" / "resolved_config.toml").exists()

    def test_zero_workers_is_usage_error(self, tmp_path, trained, dataset, capsys):
        code = main(["eval", "--checkpoint", str(trained / CHECKPOINT_NAME), "--data", str(dataset),
                     "--out", str(tmp_path / "z"), "--workers", "0"])
        assert code == 1
        assert "workers" in capsys.readouterr().err


def test_perfect_oracle_clean_row(tmp_path, small_samples):
    oracle = {s.image.tobytes(): s.mask.astype(np.float32) for s in small_samples}
    report = evaluate_robustness(lambda image: oracle[image.tobytes()], small_samples, grid=())
    write_clean_report(report, tmp_path)
    row = pd.read_csv(tmp_path / "clean.csv").iloc[0]
    assert row["IOU"] == 100.0
    assert row["Pd"] == 100.0
    assert row["Fa"] == 0.0


class TestCorrupt:
    @pytest.fixture
    def image_path(self, tmp_path, fixture_image):
        path = tmp_path / "in.png"
        Image.fromarray(np.round(fixture_image * 255).astype(np.uint8)).save(path)
        return path

    def test_byte_identical(self, tmp_path, image_path):
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        for out in (a, b):
            assert main(["corrupt", str(image_path), "gaussian_noise", "2", "--seed", "1", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_kind(self, tmp_path, image_path, capsys):
        assert main(["corrupt", str(image_path), "fog", "1", str(tmp_path / "o.png")]) == 1
        err = capsys.readouterr().err
        assert "error:" in err
        assert all(kind.value in err for kind in CorruptionKind)

    def test_severity_out_of_range(self, tmp_path, image_path, capsys):
        assert main(["corrupt", str(image_path), "shot_noise", "4", str(tmp_path / "o.png")]) == 1
        assert "range" in capsys.readouterr().err


def test_report_compares_runs(tmp_path, trained, dataset, capsys):
    runs = []
    for name in ("hrl", "again"):
        out = tmp_path / name
        assert main(["eval", "--checkpoint", str(trained / CHECKPOINT_NAME), "--data", str(dataset),
                     "--out", str(out)]) == 0
        runs.append(str(out))
    assert main(["report", "--runs", *runs, "--out", str(tmp_path / "report")]) == 0
    table = pd.read_csv(tmp_path / "report" / "comparison.csv")
    assert list(table["method"]) == ["hrl", "again"]
    assert (tmp_path / "report" / "comparison.md").exists()
    assert (tmp_path / "report" / "resolved_config.toml").exists()
