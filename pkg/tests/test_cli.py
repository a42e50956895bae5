import hashlib
import json

import numpy as np
import pytest

from throttlenet import tensor as T
from throttlenet.cli import main
from throttlenet.data import write_idx

FAST = ["--set", "arch.name='t-mlp'", "--set", "arch.n_components=4", "--set", "arch.widths=[8, 8]",
        "--set", "data.count=48", "--set", "data.test_count=24", "--set", "data.shape=[1, 4, 4]",
        "--set", "train.epochs=2", "--set", "train.batch_size=16",
        "--set", "controller.epochs=2", "--set", "controller.batch_size=16"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def trained(tmp_path):
    out = tmp_path / "run"
    assert main(["train-datapath", "--out", str(out), *FAST]) == 0
    return out


def test_train_datapath_smoke(trained):
    assert (trained / "datapath.ckpt").is_file()
    lines = (trained / "datapath_metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 * 3  # 2 epochs of 3 steps
    first = json.loads(lines[0])
    assert set(first) == {"phase", "epoch", "step", "L", "C", "J", "utilization", "lr", "seed"}
    cfg = json.loads((trained / "train-datapath.config.json").read_text())
    assert cfg["train"]["epochs"] == 2 and cfg["arch"]["widths"] == [8, 8]


def test_epoch_override(tmp_path):
    out = tmp_path / "one"
    assert main(["train-datapath", "--out", str(out), *FAST, "--set", "train.epochs=1"]) == 0
    epochs = {json.loads(l)["epoch"] for l in (out / "datapath_metrics.jsonl").read_text().splitlines()}
    assert epochs == {0}


def test_config_file_and_seed_flag(tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text('seed = 5\n[arch]\nname = "t-mlp"\nn_components = 2\nwidths = [4]\n'
                   '[data]\ncount = 16\ntest_count = 8\nshape = [1, 2, 2]\n[train]\nepochs = 1\nbatch_size = 8\n')
    assert main(["train-datapath", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["train-datapath", "--config", str(cfg), "--seed", "6", "--out", str(tmp_path / "b")]) == 0
    seeds = [json.loads((tmp_path / d / "train-datapath.config.json").read_text())["seed"] for d in "ab"]
    assert seeds == [5, 6]


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[train]\nepochs = = 3\n")
    assert main(["train-datapath", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "line 2" in capsys.readouterr().err
    assert main(["train-datapath", "--out", str(tmp_path), "--set", "train.epochz=3"]) == 2


def test_missing_dataset_path_names_field(tmp_path, capsys):
    code = main(["train-datapath", "--out", str(tmp_path), "--set", "data.kind='idx'",
                 "--set", f"data.path='{tmp_path / 'nope.idx'}'"])
    assert code == 2 and "data.path" in capsys.readouterr().err


def test_idx_data_runs(tmp_path):
    rng = np.random.default_rng(0)
    write_idx(tmp_path / "x.idx", rng.integers(0, 256, (20, 4, 4)).astype(np.uint8))
    write_idx(tmp_path / "y.idx", (np.arange(20) % 3).astype(np.uint8))
    code = main(["train-datapath", "--out", str(tmp_path / "r"), "--set", "data.kind='idx'",
                 "--set", f"data.path='{tmp_path / 'x.idx'}'", "--set", f"data.labels='{tmp_path / 'y.idx'}'",
                 "--set", "arch.n_components=2", "--set", "arch.widths=[4]", "--set", "train.epochs=1"])
    assert code == 0


def test_controller_and_learned_sweep(trained):
    ckpt = trained / "datapath.ckpt"
    before = _sha(ckpt)
    assert main(["train-controller", "--datapath", str(ckpt), "--out", str(trained), *FAST]) == 0
    assert (trained / "controller.ckpt").is_file() and _sha(ckpt) == before
    code = main(["sweep", "--datapath", str(ckpt), "--controller", str(trained / "controller.ckpt"),
                 "--strategy", "learned", "--out", str(trained), *FAST])
    assert code == 0
    assert len((trained / "curve_learned.csv").read_text().splitlines()) == 18
    assert (trained / "profile.csv").read_text().startswith("u_target,module_id,mean_activation\n")


def test_concrete_nonpositive_temperature_exits_2(trained):
    code = main(["train-controller", "--datapath", str(trained / "datapath.ckpt"), "--out", str(trained), *FAST,
                 "--set", "controller.estimator='concrete'", "--set", "controller.temperature=0.0"])
    assert code == 2


def test_missing_or_corrupt_checkpoint_exits_2(trained, tmp_path):
    assert main(["train-controller", "--datapath", str(tmp_path / "none.ckpt"), "--out", str(trained), *FAST]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["sweep", "--datapath", str(bad), "--out", str(trained), *FAST]) == 2


def test_learned_without_controller_exits_2(trained):
    code = main(["sweep", "--datapath", str(trained / "datapath.ckpt"), "--strategy", "learned",
                 "--out", str(trained), *FAST])
    assert code == 2


def test_sweep_rows_and_determinism(trained, capsys):
    args = ["sweep", "--datapath", str(trained / "datapath.ckpt"), "--strategy", "independent", *FAST]
    assert main([*args, "--out", str(trained / "s1")]) == 0
    assert "auc" in capsys.readouterr().out
    assert main([*args, "--out", str(trained / "s2")]) == 0
    a, b = (trained / "s1" / "curve_independent.csv"), (trained / "s2" / "curve_independent.csv")
    assert len(a.read_text().splitlines()) == 18 and a.read_bytes() == b.read_bytes()


def test_training_logs_are_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["train-datapath", "--out", str(tmp_path / d), *FAST]) == 0
    assert _sha(tmp_path / "a" / "datapath_metrics.jsonl") == _sha(tmp_path / "b" / "datapath_metrics.jsonl")
    assert _sha(tmp_path / "a" / "datapath.ckpt") == _sha(tmp_path / "b" / "datapath.ckpt")


def test_gradcheck_passes_and_lists_each_op_once(capsys):
    assert main(["gradcheck"]) == 0
    rows = [line.split()[0] for line in capsys.readouterr().out.splitlines()]
    for kind in T.OP_KINDS:
        assert rows.count(kind) == 1


def test_gradcheck_names_corrupted_op(monkeypatch, capsys):
    def bad_relu(x):
        mask = x.data > 0
        return T._record("relu", np.maximum(x.data, 0.0), (x,), lambda g: (2.0 * g * mask,), flops=x.size)

    monkeypatch.setattr(T, "relu", bad_relu)
    assert main(["gradcheck"]) == 1
    assert "relu" in capsys.readouterr().err


def test_unknown_command_exits_2():
    assert main(["frobnicate"]) == 2
