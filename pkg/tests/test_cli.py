import csv
import json

import numpy as np
import pytest

from agrp import checkpoint
from agrp.cli import main, sweep_cells
from agrp.config import ExperimentConfig
from agrp.data import write_idx

TINY_DATA = {"synthetic": {"classes": 3, "per_class": 12, "image_side": 12, "noise_level": 0.25, "seed": 0}}


def write_config(path, **overrides):
    cfg = {
        "variant": "RGT_AT_R",
        "group_size": 2,
        "epochs": 2,
        "batch_instances": 4,
        "lr0": 0.5,
        "negatives_per_epoch": 3,
        "extractor": {"channels": 4},
        "dataset": TINY_DATA,
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


def last_metric(capsys):
    line = capsys.readouterr().out.strip().splitlines()[-1]
    name, value = line.split("=")
    return name, float(value)


def test_gen_data_manifest(tmp_path, capsys):
    args = ["gen-data", "--classes", "5", "--per-class", "200", "--noise-level", "0.4", "--seed", "1", "--out"]
    assert main(args + [str(tmp_path / "a")]) == 0
    manifest = json.loads((tmp_path / "a/manifest.json").read_text())
    assert manifest["noise_level"] == 0.4
    assert manifest["noise_counts"] == {"correct": 600, "cross_category": 200, "cross_domain": 200}
    assert main(args + [str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_gen_data_rejects_bad_noise_level(tmp_path, capsys):
    assert main(["gen-data", "--noise-level", "1.5", "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1


def test_unknown_flag_is_a_config_error(capsys):
    assert main(["train", "--frobnicate"]) == 2


def test_gen_data_from_idx(tmp_path):
    rng = np.random.default_rng(0)
    write_idx(tmp_path / "ci", tmp_path / "cl", rng.integers(0, 256, (20, 12, 12)), np.arange(20) % 2)
    write_idx(tmp_path / "di", tmp_path / "dl", rng.integers(0, 256, (5, 12, 12)), [7] * 5)
    rc = main([
        "gen-data", "--idx-images", str(tmp_path / "ci"), "--idx-labels", str(tmp_path / "cl"),
        "--distractor-images", str(tmp_path / "di"), "--distractor-labels", str(tmp_path / "dl"),
        "--noise-level", "0.5", "--out", str(tmp_path / "ds"),
    ])
    assert rc == 0
    manifest = json.loads((tmp_path / "ds/manifest.json").read_text())
    assert manifest["noise_counts"] == {"correct": 10, "cross_category": 5, "cross_domain": 5}


def test_config_rejects_unknown_keys(tmp_path):
    path = write_config(tmp_path / "c.json", learning_rate=3)
    assert main(["train", str(path)]) == 2


def test_config_defaults_and_echo(tmp_path):
    exp = ExperimentConfig.from_dict({"dataset": TINY_DATA})
    assert exp.dataset["synthetic"]["background"] == 1.0
    assert exp.train.lam == 0.1
    echoed = json.loads(exp.echo(tmp_path).read_text())
    assert ExperimentConfig.from_dict(echoed) == exp


def test_train_outputs_and_replay(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert main(["train", str(cfg), "--out", str(tmp_path / "r1")]) == 0
    assert main(["train", str(cfg), "--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r1/model.agrp").read_bytes() == (tmp_path / "r2/model.agrp").read_bytes()
    rows = list(csv.reader(open(tmp_path / "r1/history.csv")))
    assert rows[0] == ["epoch", "l_class", "r_term", "total", "lr"]
    assert len(rows) == 3
    assert json.loads((tmp_path / "r1/resolved_config.json").read_text())["variant"] == "RGT_AT_R"


def test_train_zero_epochs(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", epochs=0)
    assert main(["train", str(cfg), "--out", str(tmp_path / "r")]) == 0
    assert checkpoint.load(tmp_path / "r/model.agrp").step == 0
    assert len(list(csv.reader(open(tmp_path / "r/history.csv")))) == 1


def test_history_echoes_schedule(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", epochs=6, lr0=0.001, lr_drop_epoch=5, lr_drop_factor=0.1)
    assert main(["train", str(cfg), "--out", str(tmp_path / "r")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "r/history.csv")))
    assert float(rows[4]["lr"]) == 0.001
    assert float(rows[5]["lr"]) == pytest.approx(1e-4, rel=1e-12)


def test_train_divergence_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", lr0=1e300, variant="AP", epochs=3)
    assert main(["train", str(cfg), "--out", str(tmp_path / "r")]) == 3


@pytest.fixture
def trained(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    main(["train", str(cfg), "--out", str(tmp_path / "run")])
    main(["gen-data", "--classes", "3", "--per-class", "12", "--image-side", "12", "--noise-level", "0.25", "--out", str(tmp_path / "data")])
    capsys.readouterr()
    return tmp_path


def test_eval_rerank_attmap(trained, capsys):
    ck, data = str(trained / "run/model.agrp"), str(trained / "data")
    assert main(["eval", "--checkpoint", ck, "--data", data, "--out", str(trained / "pred.csv")]) == 0
    name, acc = last_metric(capsys)
    assert name == "accuracy" and 0.0 <= acc <= 1.0
    assert len(list(csv.reader(open(trained / "pred.csv")))) == 18 + 1

    assert main(["rerank", "--checkpoint", ck, "--data", data, "--out", str(trained / "rank.csv")]) == 0
    name, _ = last_metric(capsys)
    assert name == "map"
    assert len(list(csv.reader(open(trained / "rank.csv")))) - 1 == 36

    assert main(["attmap", "--checkpoint", ck, "--data", data, "--limit", "3", "--out", str(trained / "maps")]) == 0
    assert len(list((trained / "maps").glob("*.pgm"))) == 3
    assert last_metric(capsys)[0] == "localization"


def test_mismatched_checkpoint_exit_code(trained, capsys):
    main(["gen-data", "--classes", "3", "--per-class", "4", "--image-side", "14", "--out", str(trained / "other")])
    rc = main(["eval", "--checkpoint", str(trained / "run/model.agrp"), "--data", str(trained / "other")])
    assert rc == 4


def test_sweep_grid_arithmetic():
    exp = ExperimentConfig.from_dict({"group_sizes": [1, 2, 3, 4], "noise_levels": [0.2, 0.4, 0.6], "seeds": [0, 1, 2, 3, 4]})
    cells = sweep_cells(exp)
    assert len(cells) == 60
    assert {c[3] for c in cells if c[1] == 1} == {"AP_AT"}
    assert {c[3] for c in cells if c[1] > 1} == {"RGT_AT_R"}


def test_sweep_is_resumable(tmp_path, capsys):
    cfg = write_config(tmp_path / "s.json", epochs=1, group_sizes=[1, 2], noise_levels=[0.25], seeds=[0], output_dir=str(tmp_path / "sw"))
    assert main(["sweep", str(cfg)]) == 0
    rows = list(csv.reader(open(tmp_path / "sw/sweep.csv")))
    assert rows[0] == ["noise_level", "group_size", "seed", "variant", "accuracy", "map"]
    assert len(rows) == 3
    assert rows[1][3] == "AP_AT"
    # drop the last row to simulate an interruption, then resume
    with open(tmp_path / "sw/sweep.csv", "w", newline="") as f:
        csv.writer(f).writerows(rows[:2])
    assert main(["sweep", str(cfg)]) == 0
    again = list(csv.reader(open(tmp_path / "sw/sweep.csv")))
    assert len(again) == 3
    assert again[2] == rows[2]
    assert main(["sweep", str(cfg)]) == 0
    assert len(list(csv.reader(open(tmp_path / "sw/sweep.csv")))) == 3


def test_gradcheck_passes_and_perturb_fails(capsys):
    assert main(["gradcheck", "--seeds", "2"]) == 0
    report = capsys.readouterr().out.splitlines()
    names = [line.split()[0] for line in report[:-1]]
    assert len(names) == len(set(names)) == 9
    assert main(["gradcheck", "--seeds", "2", "--perturb"]) == 3
