import csv
import io
import json

import numpy as np
import pytest

from clewi.buffer import MemoryBuffer
from clewi.cli import main
from clewi.config import ConfigError, parse_config, to_ini
from clewi.data import write_idx
from clewi.experiment import (INTERP_GRID, build_stream, interp_plot, memory_budget, run, run_seed,
                              width_sweep)
from clewi.matching import apply_permutation, calc_permutation
from clewi.metrics import evaluate
from clewi.models import build_model, permutation_spec_of
from conftest import filled_buffer, make_arch

SMALL = """
[experiment]
seeds = 0, 1
[data]
n_per_class = 24
dim = 8
[train]
epochs = 1
[buffer]
capacity = 40
[clewi]
enabled = true
alpha = 0.3
"""


def small(**over):
    return parse_config(SMALL).replace(**over)


def _rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_parse_defaults_and_round_trip():
    cfg = parse_config(SMALL)
    assert cfg.train.method == "er" and cfg.train.lr == 0.03 and cfg.experiment.seeds == (0, 1)
    assert cfg.run_id == "clewi-er-a0.3"
    assert parse_config(to_ini(cfg)) == cfg
    assert parse_config("[train]\nmethod = agem\n[clewi]\nenabled = yes\n").alpha == 0.5


@pytest.mark.parametrize("text,match", [
    ("[train]\nlearning_rate = 0.1\n", "unknown key"),
    ("[optim]\nlr = 0.1\n", "unknown section"),
    ("[train]\nmethod = icarl\n", "not implemented"),
    ("[train]\nmethod = joint\n[clewi]\nenabled = true\n", "joint"),
    ("[clewi]\nalpha = 1.5\n", "alpha"),
    ("[experiment]\nversion = 2\n", "version"),
    ("[data]\nnum_tasks = 3\n", "divisible"),
    ("[train]\nepochs = many\n", "parse"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_results_layout_and_artifacts(tmp_path):
    out = run(small(), tmp_path)
    rows = _rows(tmp_path / "results.csv")
    assert list(rows[0]) == ["run_id", "seed", "after_task", "metric", "value"]
    for metric in ("acc", "acc_last", "fm", "loss_forgetting"):
        assert sum(r["metric"] == metric for r in rows) == 5 * 2
    for name in ("diagnostics.csv", "timings.csv", "summary.json", "config.ini"):
        assert (tmp_path / name).exists()
    assert len(list((tmp_path / "checkpoints").iterdir())) == 10
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["metrics"]["acc"]["mean"] == pytest.approx(out.summary["acc"]["mean"])
    # interpolation happens after tasks 1..4, once per permutation group
    assert len(_rows(tmp_path / "diagnostics.csv")) == 2 * 4 * 2


def test_results_are_byte_identical(tmp_path):
    run(small(), tmp_path / "a")
    run(small(), tmp_path / "b")
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def test_event_order():
    res = run_seed(small(), 0)
    assert res.events == [("train", 0)] + [e for t in range(1, 5) for e in (("train", t), ("clewi", t))]
    off = run_seed(small(clewi__enabled=False), 0)
    assert all(kind == "train" for kind, _ in off.events)


def test_stream_class_order_follows_run_seed():
    a, b = build_stream(small(), 0), build_stream(small(), 1)
    assert sorted(a.class_order) == sorted(b.class_order) == list(range(10))
    assert a.class_order != b.class_order


@pytest.mark.parametrize("method", ["finetune", "agem", "derpp", "joint"])
def test_every_method_runs(method, tmp_path):
    cfg = small(train__method=method, clewi__enabled=method != "joint", experiment__seeds=(0,))
    out = run(cfg, tmp_path, write=False)
    assert 0.0 <= out.summary["acc"]["mean"] <= 1.0


def test_memory_budget_values():
    assert memory_budget(11220132, "cifar100", 0)["equivalent_images"] == 14609
    assert memory_budget(2351972, "cifar100", 500)["equivalent_images"] == 3062
    assert memory_budget(0, "cifar10", 0)["equivalent_images"] == 0
    assert memory_budget(11220132, "tiny-imagenet", 0)["equivalent_images"] == 11220132 * 4 // (64 * 64 * 3)
    with pytest.raises(KeyError):
        memory_budget(10, "imagenet", 0)


def test_interp_plot_grid_and_endpoints():
    arch = make_arch("small-mlp", num_classes=4)
    spec = permutation_spec_of(arch)
    theta, prev = build_model(arch, 0), build_model(arch, 1)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 12)).astype(np.float32)
    y = rng.integers(0, 4, 64)
    buf = filled_buffer(x, y)
    from clewi.data import Dataset
    tests = [Dataset(x[:32], y[:32], 4), Dataset(x[32:], y[32:], 4)]
    rows = interp_plot(theta, prev, buf, spec, INTERP_GRID, tests)
    assert len(rows) == 21 * 3
    by = {(t, a): acc for t, a, acc in rows}
    aligned = apply_permutation(prev, calc_permutation(theta, prev, buf, spec), spec)
    np.testing.assert_array_equal([by[(0, 0.0)], by[(1, 0.0)]], evaluate(theta, tests))
    np.testing.assert_array_equal([by[(0, 1.0)], by[(1, 1.0)]], evaluate(aligned, tests))


def test_width_sweep_counts_grow(tmp_path):
    table = width_sweep(small(experiment__seeds=(0,), clewi__enabled=False), [1, 2], tmp_path)
    assert table[0]["params"] < table[1]["params"]
    assert (tmp_path / "width_sweep.csv").exists()


def _write_cfg(tmp_path, text):
    p = tmp_path / "exp.ini"
    p.write_text(text)
    return p


def test_cli_exit_codes(tmp_path, capsys):
    good = _write_cfg(tmp_path, SMALL.replace("seeds = 0, 1", "seeds = 0"))
    assert main(["run", "--config", str(good), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    assert (tmp_path / "o" / "results.csv").exists()
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nmethod = mir\n")
    assert main(["run", "--config", str(bad), "--quiet"]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.ini"), "--quiet"]) == 2
    idx = tmp_path / "idx.ini"
    idx.write_text("[data]\ndataset = idx\ntrain_images = a\ntrain_labels = b\ntest_images = c\ntest_labels = d\n")
    assert main(["run", "--config", str(idx), "--quiet"]) == 3
    assert main(["memory-budget", "--reference", "resnet18", "--dataset", "cifar100"]) == 0
    assert json.loads(capsys.readouterr().out)["equivalent_images"] == 14609
    ckpt = next((tmp_path / "o" / "checkpoints").iterdir())
    assert main(["eval", "--config", str(good), str(ckpt)]) == 0
    assert len(json.loads(capsys.readouterr().out)["task_accuracy"]) == 5
    (tmp_path / "junk.clwi").write_bytes(b"nope")
    assert main(["eval", "--config", str(good), str(tmp_path / "junk.clwi"), "--quiet"]) == 3


def test_idx_stream_end_to_end(tmp_path):
    rng = np.random.default_rng(0)
    for split, n in (("train", 80), ("test", 40)):
        y = np.repeat(np.arange(4), n // 4).astype(np.uint8)
        imgs = np.zeros((n, 8, 8), np.uint8)
        for c in range(4):
            imgs[y == c, c * 2:(c * 2) + 2, :] = 200
        imgs = np.clip(imgs + rng.integers(0, 40, imgs.shape), 0, 255).astype(np.uint8)
        write_idx(imgs, y, tmp_path / f"{split}-images", tmp_path / f"{split}-labels")
    cfg = _write_cfg(tmp_path, """
[experiment]
seeds = 0
[data]
dataset = idx
num_tasks = 2
train_images = train-images
train_labels = train-labels
test_images = test-images
test_labels = test-labels
[model]
arch = small-convnet
[train]
epochs = 2
[buffer]
capacity = 20
[clewi]
enabled = true
""")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    rows = _rows(tmp_path / "o" / "results.csv")
    assert {r["after_task"] for r in rows} == {"0", "1"}
