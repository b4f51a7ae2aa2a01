import csv
import json
import math

import numpy as np
import pytest

from mtunet import cli
from mtunet.data import SynthSpec, synth_generate
from mtunet.fileio import load_array, load_checkpoint, save_tensor
from mtunet.model import ModelConfig, build_model

TINY = ["--set", "input_size=32", "--set", "stage_widths=[4,8,16,32]", "--set", "mtm_stages=[1,2]",
        "--set", "ea_slots=8", "--set", "count=4", "--set", "batch=2", "--set", "eval_count=3"]
SMALL_GC = '{"stage_widths": [2, 4, 8], "mtm_stages": [1], "ea_slots": 2}'


def run(*args):
    return cli.main([str(a) for a in args])


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_config_file_then_flags(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"steps": 7, "lr": 0.01, "seed": 3}))
    cfg = cli.load_run_config(str(cfg_path), {"seed": 9, "out": None})
    assert (cfg.steps, cfg.lr, cfg.seed) == (7, 0.01, 9)
    assert cfg.batch == 12 and cfg.beta1 == 0.9 and cfg.beta2 == 0.999 and cfg.eps == 1e-8


@pytest.mark.parametrize("body", ['{"steps": "many"}', '{"nope": 1}', "[1, 2]", "{bad json"])
def test_bad_config_exit_code(tmp_path, body):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(body)
    assert run("train", "--config", cfg_path, "--out", tmp_path / "o") == cli.EXIT_CONFIG


def test_effective_config_echoed(tmp_path):
    out = tmp_path / "o"
    assert run("synth", "--out", out, "--seed", 4, *TINY) == 0
    echoed = json.loads((out / "config.json").read_text())
    assert echoed == cli.load_run_config(None, {"seed": 4, "out": str(out), "input_size": 32,
                                                "stage_widths": [4, 8, 16, 32], "mtm_stages": [1, 2],
                                                "ea_slots": 8, "count": 4, "batch": 2,
                                                "eval_count": 3}).to_dict()


def test_zero_steps_checkpoint_is_initialisation(tmp_path):
    out = tmp_path / "o"
    assert run("train", "--out", out, "--steps", 0, *TINY) == 0
    store, config, seed = load_checkpoint(out / "checkpoint.mtc")
    fresh = build_model(ModelConfig.from_dict(config), seed=seed)
    for name, p in fresh.store.items():
        assert store[name].data.tobytes() == p.data.tobytes()
    assert read_csv(out / "loss.csv") == []


def test_training_deterministic_under_seed(tmp_path):
    for name in ("a", "b"):
        assert run("train", "--out", tmp_path / name, "--steps", 3, *TINY) == 0
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoint.mtc").read_bytes() == (tmp_path / "b" / "checkpoint.mtc").read_bytes()
    rows = read_csv(tmp_path / "a" / "loss.csv")
    assert [int(r["step"]) for r in rows] == [1, 2, 3]


def test_nan_loss_aborts_and_keeps_checkpoint(tmp_path):
    data = tmp_path / "d"
    assert run("synth", "--out", data, *TINY) == 0
    images = load_array(data / "images.mtt").copy()
    images[:] = np.nan
    save_tensor(images, data / "images.mtt")
    out = tmp_path / "o"
    assert run("train", "--out", out, "--data", data, "--steps", 2, *TINY) == cli.EXIT_NUMERIC
    assert (out / "checkpoint.mtc").exists()
    load_checkpoint(out / "checkpoint.mtc")


def test_missing_dataset_is_data_error(tmp_path):
    assert run("train", "--out", tmp_path / "o", "--data", tmp_path / "none", *TINY) == cli.EXIT_DATA


def _eval_with_pred(tmp_path, pred_fn):
    data = tmp_path / "d"
    assert run("synth", "--out", data, *TINY) == 0
    labels = load_array(data / "labels.mtt")
    save_tensor(pred_fn(labels), tmp_path / "pred.mtt")
    out = tmp_path / "e"
    assert run("eval", "--out", out, "--data", data, "--pred", tmp_path / "pred.mtt", *TINY) == 0
    return out


def test_eval_ground_truth_as_prediction(tmp_path):
    out = _eval_with_pred(tmp_path, lambda lab: lab)
    text = (out / "report.txt").read_text()
    assert "mean_dsc: 1.000000" in text and "mean_hd95: 0.000000" in text


def test_eval_all_background(tmp_path):
    out = _eval_with_pred(tmp_path, np.zeros_like)
    agg = read_csv(out / "aggregate.csv")
    assert all(float(r["dsc"]) == 0.0 and r["hd95"] == "" for r in agg)
    assert "mean_hd95: missing" in (out / "report.txt").read_text()


def test_eval_aggregate_recomputed_from_per_sample_csv(tmp_path):
    rng = np.random.default_rng(0)
    out = _eval_with_pred(tmp_path, lambda lab: np.where(rng.random(lab.shape) < 0.2, 0, lab))
    per = read_csv(out / "per_sample.csv")
    agg = {int(r["class_id"]): r for r in read_csv(out / "aggregate.csv")}
    for k, row in agg.items():
        mine = [r for r in per if int(r["class_id"]) == k]
        dsc = sum(float(r["dsc"]) for r in mine) / len(mine)
        hds = [float(r["hd95"]) for r in mine if r["hd95"]]
        assert float(row["dsc"]) == dsc
        assert float(row["hd95"]) == sum(hds) / len(hds)


def test_eval_rejects_incompatible_checkpoint(tmp_path):
    out = tmp_path / "o"
    assert run("train", "--out", out, "--steps", 0, *TINY) == 0
    code = run("eval", "--out", tmp_path / "e", "--ckpt", out / "checkpoint.mtc", *TINY, "--set", "num_classes=4")
    assert code == cli.EXIT_CONFIG


def test_eval_with_checkpoint(tmp_path):
    out = tmp_path / "o"
    assert run("train", "--out", out, "--steps", 1, *TINY) == 0
    assert run("eval", "--out", tmp_path / "e", "--ckpt", out / "checkpoint.mtc", *TINY) == 0
    assert len(read_csv(tmp_path / "e" / "per_sample.csv")) == 3 * 2


def test_gradcheck_small_model_passes_and_lists_each_parameter(tmp_path, capsys):
    out = tmp_path / "g"
    assert run("gradcheck", "--out", out, "--set", f"gradcheck_model={SMALL_GC}") == 0
    lines = (out / "gradcheck.txt").read_text().splitlines()[1:]
    names = [ln.split()[0] for ln in lines]
    model = build_model(ModelConfig.from_dict({**cli._tiny_model(), **json.loads(SMALL_GC)}))
    assert sorted(names) == sorted(model.store.names())
    assert len(names) == len(set(names))
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_negative_control(tmp_path):
    code = run("gradcheck", "--out", tmp_path / "g", "--set", f"gradcheck_model={SMALL_GC}",
               "--corrupt-backward", "gelu")
    assert code == cli.EXIT_NUMERIC


def test_bench_csv_and_determinism(tmp_path):
    args = ["--set", "bench_sizes=[8,16]", "--set", "bench_channels=8", "--set", "bench_repeats=1"]
    assert run("bench", "--out", tmp_path / "a", *args) == 0
    assert run("bench", "--out", tmp_path / "b", *args) == 0
    a, b = read_csv(tmp_path / "a" / "bench.csv"), read_csv(tmp_path / "b" / "bench.csv")
    assert list(a[0]) == ["mechanism", "side", "tokens", "macs", "wall_time_s", "mac_ratio"]
    assert [r["macs"] for r in a] == [r["macs"] for r in b]
    assert {r["mechanism"] for r in a} == set(cli.MECHANISMS)
    assert all(r["mac_ratio"] == "" for r in a[:4]) and all(r["mac_ratio"] for r in a[4:])
    assert b"\r\n" not in (tmp_path / "a" / "bench.csv").read_bytes()


def test_bench_rejects_bad_size(tmp_path):
    assert run("bench", "--out", tmp_path / "a", "--set", "bench_sizes=[10]") == cli.EXIT_CONFIG


def test_synth_output_matches_generator(tmp_path):
    assert run("synth", "--out", tmp_path / "d", *TINY) == 0
    ref = synth_generate(SynthSpec(count=4, size=32))
    np.testing.assert_array_equal(load_array(tmp_path / "d" / "labels.mtt"), ref.labels)
    assert math.isclose(float(load_array(tmp_path / "d" / "images.mtt").sum()), float(ref.images.sum()))
