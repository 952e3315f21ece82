import json

import pytest
import yaml

from diffnet.cli import EXIT_CHECK, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from diffnet.text import generate_synthetic, save_dataset

SMALL_FLAGS = ["--embed-dim", "6", "--hidden", "4", "--epochs", "1", "--batch-size", "8"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "syn.jsonl"
    save_dataset(generate_synthetic(30, seed=3), path)
    return path


def test_gradcheck_passes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == EXIT_OK
    assert "ok" in capsys.readouterr().out
    result = json.loads((tmp_path / "gradcheck.json").read_text())
    assert result["passed"] and result["max_relative_error"] < 1e-6


def test_gradcheck_failure_exit_code(tmp_path, monkeypatch):
    import diffnet.cli as cli
    monkeypatch.setattr(cli, "gradient_check", lambda **kw: 1e-3)
    assert main(["gradcheck", "--out", str(tmp_path)]) == EXIT_CHECK


def test_stem(capsys):
    assert main(["stem", "caresses", "ponies"]) == EXIT_OK
    assert capsys.readouterr().out.splitlines() == ["caresses\tcaress", "ponies\tponi"]


def test_features(capsys):
    story = "Gina's new pencils were gone."
    assert main(["features", story, "Gina was very angry.", "Gina was very calm."]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "token\tee\tes\tes-fuzzy"
    assert lines[1] == "gina\t1\t1\t1"


def test_no_command_is_usage_error(capsys):
    assert main([]) == EXIT_USAGE


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_unknown_command_is_usage_error():
    assert main(["fly"]) == EXIT_USAGE


def test_missing_dataset_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    assert main(["train", "--dataset", str(missing), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert str(missing) in capsys.readouterr().err


def test_gen_data(tmp_path):
    assert main(["gen-data", "--n", "12", "--seed", "2", "--out", str(tmp_path)]) == EXIT_OK
    assert len((tmp_path / "synthetic.jsonl").read_text().splitlines()) == 12


def test_config_file_then_flags(tmp_path, dataset):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("hidden: 5\nembed_dim: 6\nepochs: 1\nlr: 0.01\nbatch_size: 8\n")
    out = tmp_path / "o"
    argv = ["train", "--config", str(cfg), "--hidden", "3", "--no-diff", "--dataset", str(dataset),
            "--out", str(out)]
    assert main(argv) == EXIT_OK
    resolved = yaml.safe_load((out / "resolved_config.yaml").read_text())
    assert resolved["hidden"] == 3 and resolved["lr"] == 0.01 and resolved["use_diff"] is False
    assert (out / "checkpoint.bin").exists() and (out / "train_log.jsonl").exists()


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("hiddn: 5\n")
    assert main(["gradcheck", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE


def test_train_twice_identical_checkpoints(tmp_path, dataset):
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--seed", "7", "--dataset", str(dataset), "--out", str(out)] + SMALL_FLAGS) == 0
        blobs.append((out / "checkpoint.bin").read_bytes())
    assert blobs[0] == blobs[1]


def test_train_then_eval(tmp_path, dataset, capsys):
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(dataset), "--eval-dataset", str(dataset), "--out", str(out)]
                + SMALL_FLAGS) == 0
    assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--dataset", str(dataset),
                 "--out", str(out)]) == 0
    report = json.loads((out / "eval_report.json").read_text())
    assert report["n"] == 30
    assert (out / "eval_rows.csv").exists()


def test_eval_corrupt_checkpoint(tmp_path, dataset):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"junk")
    assert main(["eval", "--checkpoint", str(bad), "--dataset", str(dataset), "--out", str(tmp_path)]) == EXIT_DATA


def test_ablate_subset(tmp_path, dataset, capsys):
    argv = ["ablate", "--dataset", str(dataset), "--ids", "full,L4", "--seeds", "0", "--out", str(tmp_path)]
    assert main(argv + SMALL_FLAGS) == EXIT_OK
    rows = json.loads((tmp_path / "ablation.json").read_text())
    assert sorted(r["key"] for r in rows) == ["L4", "full"]
    assert (tmp_path / "ablation.txt").read_text().startswith("System")


def test_ablate_unknown_id(tmp_path, dataset):
    assert main(["ablate", "--dataset", str(dataset), "--ids", "L99", "--out", str(tmp_path)]) == EXIT_USAGE


def test_analyze_modes(tmp_path, dataset):
    argv = ["analyze", "--dataset", str(dataset), "--mode", "entire,drop-4", "--seeds", "0", "--out", str(tmp_path)]
    assert main(argv + SMALL_FLAGS) == EXIT_OK
    rows = json.loads((tmp_path / "quantitative.json").read_text())
    assert [r["key"] for r in rows] == ["entire", "drop-4"]


def test_ensemble(tmp_path, dataset):
    argv = ["ensemble", "--dataset", str(dataset), "--members", "2", "--out", str(tmp_path)]
    assert main(argv + SMALL_FLAGS) == EXIT_OK
    assert (tmp_path / "member_0.json").exists() and (tmp_path / "member_1.json").exists()
    assert json.loads((tmp_path / "ensemble_report.json").read_text())["n"] == 6
