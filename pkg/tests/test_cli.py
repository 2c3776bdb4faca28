import hashlib
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from shotfree.checkpoint import load_checkpoint
from shotfree.cli import main
from shotfree.data import load_csv
from shotfree.experiments import read_rows
from shotfree.training import TrainLog

SMALL_TRAIN = ["--iterations", "20", "--embed-dim", "6", "--hidden", "16", "--per-class", "6",
               "--episodes-per-iteration", "2", "--validation-interval", "10", "--val-episodes", "10"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture(scope="module")
def small_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--classes", "30", "--dim", "8", "--per-class", "40", "--seed", "3",
                 "--out-dir", str(out)]) == 0
    return out / "dataset.csv"


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, small_csv):
    out = tmp_path_factory.mktemp("train")
    assert main(["meta-train", "--data", str(small_csv), "--out-dir", str(out)] + SMALL_TRAIN) == 0
    return out


def test_gen_data_row_count_and_reproducible_hash(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    flags = ["gen-data", "--classes", "100", "--dim", "16", "--per-class", "60", "--seed", "7"]
    assert main(flags + ["--out-dir", str(a)]) == 0
    assert main(flags + ["--out-dir", str(b)]) == 0
    ds = load_csv(a / "dataset.csv")
    assert ds.features.shape == (6000, 16)
    assert _sha(a / "dataset.csv") == _sha(b / "dataset.csv")
    assert _manifest(a)["run_id"] == _manifest(b)["run_id"]


def test_gen_data_zero_spread(tmp_path):
    assert main(["gen-data", "--classes", "10", "--dim", "4", "--per-class", "5", "--spread", "0",
                 "--out-dir", str(tmp_path)]) == 0
    ds = load_csv(tmp_path / "dataset.csv")
    for c in np.unique(ds.labels):
        rows = ds.features[ds.labels == c]
        assert np.array_equal(rows, np.broadcast_to(rows[0], rows.shape))


def test_meta_train_is_reproducible(tmp_path, small_csv, trained_dir):
    assert main(["meta-train", "--data", str(small_csv), "--out-dir", str(tmp_path)] + SMALL_TRAIN) == 0
    for name in ("checkpoint.json", "train_log.csv", "train_series.csv"):
        assert _sha(tmp_path / name) == _sha(trained_dir / name)


def test_every_output_references_its_manifest(trained_dir):
    man = _manifest(trained_dir)
    ref = f"manifest.json run {man['run_id']}"
    assert len(man["outputs"]) == 3
    for path in man["outputs"]:
        text = open(path).read()
        if path.endswith(".json"):
            assert json.loads(text)["manifest"] == ref
        else:
            assert text.splitlines()[0] == f"# {ref}"
    assert man["command"] == "meta-train" and man["seed"] == 0
    assert man["config"]["max_iterations"] == 20 and man["duration_seconds"] > 0
    assert man["version"]


def test_reports_parse_back(trained_dir):
    log = TrainLog.from_csv(trained_dir / "train_log.csv")
    assert len(log.rows) == 20
    series = read_rows(trained_dir / "train_series.csv")
    losses = [r["value"] for r in series if r["metric"] == "loss"]
    assert losses == list(log.series("loss"))
    load_checkpoint(trained_dir / "checkpoint.json")


def test_missing_dataset_is_usage_error(tmp_path, capsys):
    assert main(["meta-train", "--out-dir", str(tmp_path)]) == 2
    assert main(["meta-train", "--data", str(tmp_path / "nope.csv"), "--out-dir", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_config_problems_listed_together(tmp_path, small_csv, capsys):
    code = main(["meta-train", "--data", str(small_csv), "--out-dir", str(tmp_path), "--ways", "0",
                 "--episodes-per-iteration", "0", "--lambda", "-1"])
    err = capsys.readouterr().err
    assert code == 2
    assert "ways" in err and "episodes_per_iteration" in err and "lambda" in err


def test_flag_beats_config_beats_default(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"classes": 12, "per-class": 3, "seed": 5}))
    out = tmp_path / "run"
    assert main(["gen-data", "--config", str(cfg), "--seed", "9", "--out-dir", str(out)]) == 0
    man = _manifest(out)
    assert man["config"]["classes"] == 12 and man["config"]["per_class"] == 3
    assert man["seed"] == 9 and man["config"]["dim"] == 16
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["gen-data", "--config", str(cfg), "--out-dir", str(out)]) == 2


def test_eval_matrix_smoke_mode_is_fast(tmp_path, small_csv, trained_dir):
    t0 = time.perf_counter()
    code = main(["eval-matrix", "--data", str(small_csv), "--checkpoint", f"sf={trained_dir / 'checkpoint.json'}",
                 "--episodes", "50", "--out-dir", str(tmp_path)])
    assert code == 0 and time.perf_counter() - t0 < 10
    rows = read_rows(tmp_path / "eval_matrix.csv")
    assert [(r["train"], r["shots"], r["queries"], r["episodes"]) for r in rows] == [
        ("sf", 1, 30, 50), ("sf", 5, 30, 50), ("sf", 10, 30, 50)]
    table = read_rows(tmp_path / "eval_table.csv")
    assert [r["test"] for r in table] == ["1-shot 5-way", "5-shot 5-way", "10-shot 5-way"]


def test_eval_matrix_defaults_follow_protocol():
    from shotfree.cli import build_parser
    args = build_parser().parse_args(["eval-matrix"])
    assert (args.episodes, args.test_queries, args.test_shots, args.eval_ways) == (2000, 30, [1, 5, 10], 5)


def test_eval_matrix_dimension_mismatch_is_explained(tmp_path, trained_dir, capsys):
    assert main(["gen-data", "--classes", "30", "--dim", "5", "--per-class", "40", "--out-dir", str(tmp_path)]) == 0
    code = main(["eval-matrix", "--data", str(tmp_path / "dataset.csv"), "--checkpoint",
                 str(trained_dir / "checkpoint.json"), "--episodes", "5", "--out-dir", str(tmp_path)])
    assert code == 2
    assert "expects 8 input features" in capsys.readouterr().err


def test_ablate_mu_factor_emits_four_rows(tmp_path, small_csv):
    flags = ["ablate", "--axis", "mu-factor", "--data", str(small_csv), "--episodes", "20",
             "--queries", "5"] + SMALL_TRAIN
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(flags + ["--out-dir", str(a)]) == 0
    assert main(flags + ["--out-dir", str(b)]) == 0
    rows = read_rows(a / "ablation.csv")
    assert [r["value"] for r in rows] == [1, 2, 5, 10]
    assert [r["checkpoint_id"] for r in rows] == [r["checkpoint_id"] for r in read_rows(b / "ablation.csv")]


def test_ablate_unknown_axis_is_usage_error(tmp_path, small_csv):
    assert main(["ablate", "--axis", "depth", "--data", str(small_csv), "--out-dir", str(tmp_path)]) == 2


def test_collapse_demo_exit_codes(tmp_path):
    assert main(["collapse-demo", "--out-dir", str(tmp_path / "ok")]) == 0
    report = json.loads((tmp_path / "ok" / "collapse_report.json").read_text())
    assert report["center"]["final_spread"] < 1e-3
    assert main(["collapse-demo", "--lr", "10", "--out-dir", str(tmp_path / "bad")]) == 1


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--out-dir", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "gradcheck.csv")
    assert all(r["passed"] for r in rows) and len(rows) == 24


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "shotfree", "gradcheck", "--out-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    bad = subprocess.run([sys.executable, "-m", "shotfree", "frobnicate"], capture_output=True, text=True)
    assert bad.returncode == 2


@pytest.mark.slow
def test_sgd_recipe_with_lifted_prototypes_within_budget(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--out-dir", str(data)]) == 0
    t0 = time.perf_counter()
    assert main(["meta-train", "--data", str(data / "dataset.csv"), "--recipe", "sgd", "--ways", "5",
                 "--per-class", "16", "--mu-factor", "2", "--out-dir", str(tmp_path / "run")]) == 0
    assert time.perf_counter() - t0 < 300
