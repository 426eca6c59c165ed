import csv
import json
import subprocess
import sys

import pytest

from bpl.cli import main
from bpl.config import dump_kv
from bpl.data import GeneratorConfig

SMALL = GeneratorConfig(num_users=40, num_items=30, density=0.2, counterfactual_per_user=5)
FAST = "epochs=3\nwarmup_epochs=1\npatience=2\nembedding_dim=4\naffinity_epochs=3\n"


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "gen.txt").write_text(dump_kv(SMALL))
    (root / "fast.txt").write_text(FAST)
    assert main(["simulate", "--config", str(root / "gen.txt"), str(root / "data")]) == 0
    return root


def _train(root, mode, name):
    return main(["train", "--mode", mode, "--data-dir", str(root / "data"), "--run-dir", str(root / name),
                 "--config", str(root / "fast.txt")])


def test_simulate_writes_contract(data_dir):
    out = data_dir / "data"
    for name in ("train.tsv", "val.tsv", "factual.tsv", "counterfactual.tsv", "dataset.txt",
                 "world_ratings.tsv", "world_exposure.tsv", "generator_config.txt"):
        assert (out / name).exists(), name
    assert "num_users=40" in (out / "generator_config.txt").read_text()


def test_simulate_is_byte_identical(data_dir):
    assert main(["simulate", "--config", str(data_dir / "gen.txt"), str(data_dir / "again")]) == 0
    for f in (data_dir / "data").iterdir():
        assert f.read_bytes() == (data_dir / "again" / f.name).read_bytes(), f.name


def test_simulate_missing_key(tmp_path, capsys):
    text = dump_kv(SMALL).replace("seed=0\n", "")
    (tmp_path / "gen.txt").write_text(text)
    assert main(["simulate", "--config", str(tmp_path / "gen.txt"), str(tmp_path / "out")]) == 1
    assert "seed" in capsys.readouterr().err


def test_train_and_evaluate(data_dir, capsys):
    assert _train(data_dir, "standard", "run_std") == 0
    assert _train(data_dir, "ablation:no_pd", "run_nopd") == 0
    info = json.loads((data_dir / "run_nopd" / "metrics.json").read_text())
    assert info["ablation"] == "no_pd" and info["mode"] == "ablation:no_pd"
    assert json.loads((data_dir / "run_std" / "metadata.json").read_text())["mode"] == "standard"
    capsys.readouterr()

    report = data_dir / "report"
    assert main(["evaluate", str(data_dir / "run_std"), str(data_dir / "run_nopd"), "--data-dir",
                 str(data_dir / "data"), "--out", str(report), "--buckets", "--num-buckets", "4"]) == 0
    rows = list(csv.DictReader(open(report.with_suffix(".csv"))))
    assert [r["run"] for r in rows] == ["run_std", "run_nopd"]
    assert {"factual_mse", "counterfactual_mse", "harmonic_mean_mse"} <= set(rows[0])
    buckets = list(csv.DictReader(open(data_dir / "report_buckets.csv")))
    assert len(buckets) == 8
    assert len(capsys.readouterr().out.strip().splitlines()) == 2


def test_unknown_mode_is_usage_error(data_dir):
    with pytest.raises(SystemExit) as exc:
        _train(data_dir, "fancy", "nope")
    assert exc.value.code == 2


def test_evaluate_missing_checkpoint(data_dir, tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["evaluate", str(tmp_path / "empty"), "--data-dir", str(data_dir / "data"),
                 "--out", str(tmp_path / "r")]) == 1
    assert "model.bin" in capsys.readouterr().err


def test_prepare_protocols(tmp_path):
    lines = [f"u{u}\ti{i}\t{1 + (u + i) % 5}" for u in range(30) for i in range(8) if (u * i) % 3 == 0]
    (tmp_path / "train.txt").write_text("\n".join(lines) + "\n")
    (tmp_path / "test.txt").write_text("\n".join(f"u{u}\ti{(u + 1) % 9}\t3" for u in range(30)) + "\n")
    assert main(["prepare", "--train", str(tmp_path / "train.txt"), str(tmp_path / "main")]) == 0
    assert (tmp_path / "main" / "factual.tsv").exists() and (tmp_path / "main" / "users.map").exists()
    assert main(["prepare", "--train", str(tmp_path / "train.txt"), "--test", str(tmp_path / "test.txt"),
                 "--protocol", "rct", str(tmp_path / "rct")]) == 0
    assert not (tmp_path / "rct" / "factual.tsv").exists()
    assert "num_items=9" in (tmp_path / "rct" / "dataset.txt").read_text()
    assert main(["prepare", "--train", str(tmp_path / "train.txt"), "--protocol", "rct", str(tmp_path / "x")]) == 1


def test_config_and_entry_point():
    out = subprocess.run([sys.executable, "-m", "bpl.cli", "config", "training"], capture_output=True, text=True)
    assert out.returncode == 0 and "tau=0.999" in out.stdout and "lam=1.0" in out.stdout
    out = subprocess.run([sys.executable, "-m", "bpl.cli", "--version"], capture_output=True, text=True)
    assert out.stdout.strip() == "0.1.0"
