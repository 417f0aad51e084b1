import io
import json
import math
from pathlib import Path

import numpy as np
import pytest

from steerer import ops
from steerer.checkpoint import (MAGIC, Checkpoint, CheckpointError, build_model, checkpoint_bytes, load_checkpoint,
                                save_checkpoint)
from steerer.cli import main
from steerer.config import ConfigError, RunConfig, format_config, parse_config, set_key
from steerer.density import PointSet, is_interior
from steerer.gradcheck import PRIMITIVE_CASES, rel_error, run_gradcheck
from steerer.harness import (CHECKPOINT_NAME, NumericError, Trainer, crop_level0, evaluate, evaluate_predictions,
                             generate_data, gt_density_fn, pad_image, predict_density, routing_report, train)
from steerer.metrics import MatchResult, counting_metrics, extract_maxima, match_points, prf
from steerer.serialize import FormatError, read_tensors, write_tensors
from steerer.synth import load_split, read_corpus
from steerer.tensor import Tensor, make_result, no_grad

TINY = """
data.train = 4
data.val = 2
model.levels = 1
model.channels = 4
loss.patch_px = 32
optim.epochs = 1
optim.warmup_epochs = 0
optim.batch_size = 2
"""


def tiny_config(root, out=None) -> RunConfig:
    cfg = parse_config(TINY)
    cfg.data.root = str(root)
    cfg.out = str(out or root)
    return cfg


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config(root / "corpus", root / "run")
    generate_data(cfg)
    ckpt = train(cfg)
    return cfg, ckpt


# --------------------------------------------------------------------------- config


def test_config_defaults_and_parse():
    cfg = RunConfig()
    cfg.validate()
    assert (cfg.model.levels, cfg.model.channels, cfg.loss.patch_px, cfg.optim.batch_size,
            cfg.optim.epochs, cfg.optim.peak_lr) == (3, 32, 64, 4, 40, 1e-3)
    cfg = parse_config("# c\nseed = 5\nmodel.fusion_mode = bl2_fpn  # trailing\n\n")
    assert cfg.seed == 5 and cfg.model.fusion_mode == "bl2_fpn"
    assert parse_config(format_config(cfg)) == cfg


@pytest.mark.parametrize("text,msg", [
    ("model.nope = 1", "unknown"),
    ("bogus", "expected"),
    ("model.levels = x", "cannot parse"),
    ("model.fusion_mode = other", "fusion_mode"),
    ("loss.patch_px = 48", "patch_px"),
    ("optim.crop_px = 80", "crop_px"),
    ("model = 3", "unknown"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_config_error_names_line():
    with pytest.raises(ConfigError, match="f.cfg:2:"):
        parse_config("seed = 1\nmodel.nope = 2\n", "f.cfg")


def test_config_dict_round_trip():
    cfg = RunConfig()
    set_key(cfg, "density.sigma0", "1.5")
    set_key(cfg, "verbose", "yes")
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


# --------------------------------------------------------------------------- serialization, checkpoints


def test_tensor_blob_round_trip():
    tensors = {"a": np.arange(6, dtype=np.float64).reshape(2, 3), "b": np.array([1, -2], dtype=np.int64),
               "c": np.float32(2.5) * np.ones((1, 1, 2, 2), np.float32), "d": np.zeros((0, 3))}
    buf = io.BytesIO()
    write_tensors(buf, tensors)
    back = read_tensors(io.BytesIO(buf.getvalue()))
    assert back.keys() == tensors.keys()
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and back[k].tobytes() == tensors[k].tobytes()
    with pytest.raises(FormatError):
        read_tensors(io.BytesIO(buf.getvalue()[:-3]))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = RunConfig()
    set_key(cfg, "model.levels", 2)
    set_key(cfg, "model.channels", 4)
    set_key(cfg, "loss.patch_px", 64)
    cfg.optim.warmup_epochs = 3  # int in a float field must not change the bytes after reload
    model = build_model(cfg)
    for p in model.parameters():
        p.m[...] = 0.25
        p.step = 3
    ckpt = Checkpoint(cfg, model, 2, [{"epoch": 0, "mae": 1.5}])
    save_checkpoint(tmp_path / "c.bin", ckpt)
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.config.to_dict() == cfg.to_dict() and back.epoch == 2 and back.history == ckpt.history
    assert checkpoint_bytes(back) == checkpoint_bytes(ckpt)
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 1, 64, 64)))
    model.eval()
    back.model.eval()
    with no_grad():
        assert model(x).final.data.tobytes() == back.model(x).final.data.tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.bin")
    (tmp_path / "bad.bin").write_bytes(b"NOTACKPT....")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.bin")
    raw = bytearray(checkpoint_bytes(Checkpoint(RunConfig(), build_model(RunConfig()))))
    raw[len(MAGIC)] = 9
    (tmp_path / "ver.bin").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.bin")


# --------------------------------------------------------------------------- harness


def test_pad_crop_identity():
    img = np.random.default_rng(0).uniform(size=(64, 64))
    assert pad_image(img, 32) is img
    d = np.random.default_rng(1).uniform(size=(16, 16))
    np.testing.assert_array_equal(crop_level0(d, (64, 64)), d)
    padded = pad_image(np.ones((50, 70)), 32)
    assert padded.shape == (64, 96) and padded[50:].sum() == 0
    assert crop_level0(np.ones((16, 24)), (50, 70)).shape == (13, 18)


def test_train_smoke_and_schedule(tiny_run):
    cfg, ckpt = tiny_run
    path = Path(cfg.out) / CHECKPOINT_NAME
    assert path.exists()
    assert ckpt.epoch == 1 and len(ckpt.history) == 1
    h = ckpt.history[0]
    assert all(math.isfinite(h[k]) for k in ("loss", "mae", "mse", "nae", "f1"))
    assert len(h["train_shares"]) == 2
    assert load_checkpoint(path).history == ckpt.history


def test_step_order_trace(tiny_run):
    cfg, _ = tiny_run
    cfg = tiny_config(cfg.data.root)
    cfg.verbose = True
    t = Trainer(cfg)
    scenes = load_split(cfg.data.root, read_corpus(cfg.data.root), "train")
    t._gt_cache = {}
    x, gts = t._batch(scenes, [0, 1])
    t.train_step(x, gts, 1e-3)
    assert t.trace == ["forward", "pwsp", "loss", "backward", "adam"]


def test_nan_loss_aborts_with_diagnostics(tiny_run):
    cfg, _ = tiny_run
    cfg = tiny_config(cfg.data.root)
    t = Trainer(cfg)
    scenes = load_split(cfg.data.root, read_corpus(cfg.data.root), "train")
    bad = [(np.full_like(img, np.nan), pts) for img, pts in scenes]
    with np.errstate(invalid="ignore"), pytest.raises(NumericError, match="epoch 0, batch 0"):
        t.fit(bad)


def test_seeded_runs_identical(tiny_run, tmp_path):
    cfg, ckpt = tiny_run
    again = train(tiny_config(cfg.data.root, cfg.out), save=False)
    assert checkpoint_bytes(again) == checkpoint_bytes(ckpt)


def test_evaluate_gt_oracle_is_perfect(tiny_run):
    cfg, _ = tiny_run
    cfg = tiny_config(cfg.data.root)
    # a sigma-2 kernel peaks at ~0.04, under the 0.1 detection threshold
    cfg.density.sigma0 = 1.0
    scenes = []
    for img, pts in load_split(cfg.data.root, read_corpus(cfg.data.root), "val"):
        keep = [is_interior(x, y, img.shape, cfg.density.sigma0) for x, y in pts.points]
        scenes.append((img, PointSet(pts.points[keep], pts.radii[keep])))
    assert sum(len(p) for _, p in scenes) > 10
    rep = evaluate_predictions(scenes, gt_density_fn(cfg), cfg)
    assert rep["mae"] < 1e-9 and rep["mse"] < 1e-9 and rep["nae"] < 1e-9
    # well separated small blobs plus min-4px clamp: every peak lands on its own point
    assert rep["f1"] == 1.0


def test_evaluate_matches_recomputation(tiny_run):
    cfg, ckpt = tiny_run
    rep = evaluate(cfg, ckpt, "val")
    scenes = load_split(cfg.data.root, read_corpus(cfg.data.root), "val")
    pairs, tp, fp, fn = [], 0, 0, 0
    for img, pts in scenes:
        d = predict_density(ckpt.model, img, cfg)
        pairs.append((float(d.sum()), float(len(pts))))
        m = match_points(extract_maxima(d, cfg.localize.threshold, cfg.localize.window, 4), pts,
                         np.maximum(pts.radii, 4.0))
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    assert (rep["mae"], rep["mse"], rep["nae"]) == counting_metrics(pairs)
    assert rep["f1"] == prf(MatchResult(tp, fp, fn))[2]
    assert abs(sum(rep["level_shares"]) - 1.0) < 1e-12


def test_untrained_model_reports_finite(tiny_run):
    cfg, _ = tiny_run
    cfg = tiny_config(cfg.data.root)
    rep = evaluate(cfg, Checkpoint(cfg, build_model(cfg)), "val")
    assert all(math.isfinite(rep[k]) for k in ("mae", "mse", "nae", "precision", "recall", "f1"))


def test_predict_count_is_sum_of_cropped_map(tiny_run):
    cfg, ckpt = tiny_run
    img = np.random.default_rng(2).uniform(size=(50, 70))
    d = predict_density(ckpt.model, img, cfg)
    assert d.shape == (13, 18)
    assert abs(float(d.sum()) - sum(float(v) for v in d.ravel())) < 1e-9


def test_routing_report_fields(tiny_run):
    cfg, ckpt = tiny_run
    scenes = load_split(cfg.data.root, read_corpus(cfg.data.root), "val")
    r = routing_report(ckpt.model, scenes, cfg)
    assert sum(r["histogram"]) == len(scenes) * (128 // 32) ** 2
    assert r["small_only_patches"] > 0


# --------------------------------------------------------------------------- gradcheck


def test_rel_error_floor():
    assert rel_error(np.zeros(3), np.full(3, 1e-12)) < 1e-6
    assert rel_error(np.ones(3), np.ones(3) * 1.1) == pytest.approx(0.1 / 1.1)


def test_gradcheck_primitives_pass_and_repeat():
    a = run_gradcheck(seed=1, trials=3, include_model=False)
    b = run_gradcheck(seed=1, trials=3, include_model=False)
    assert a.passed
    assert a.format() == b.format()
    assert {r.name for r in a.results} == set(PRIMITIVE_CASES)


def test_gradcheck_catches_corrupted_backward():
    def bad_relu(x):
        mask = x.data > 0
        return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask * 1.01,), "relu")

    def build(rng):
        return (lambda t: bad_relu(t[0])), [rng.normal(size=(2, 2, 3, 3))]

    rep = run_gradcheck(seed=0, trials=2, cases={"relu_corrupted": build}, include_model=False)
    assert not rep.passed
    assert "relu_corrupted" in rep.format() and "FAIL" in rep.format()


# --------------------------------------------------------------------------- CLI


def test_cli_usage_errors(capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["train", "--set", "nokey"]) == 1
    assert main(["train", "--set", "model.zzz=1"]) == 1


def test_cli_data_errors(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "none.bin")]) == 2
    assert main(["train", "--set", f"data.root={tmp_path / 'empty'}"]) == 2


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--trials", "1"]) == 0
    assert "overall PASS" in capsys.readouterr().out


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(TINY + f"data.root = {tmp_path / 'corpus'}\n")
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "run")]) == 0
    ckpt = str(tmp_path / "run" / CHECKPOINT_NAME)
    assert (tmp_path / "run" / "config.txt").exists()
    capsys.readouterr()

    assert main(["eval", "--ckpt", ckpt, "--out", str(tmp_path / "eval.json")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["split"] == "val" and rep == json.loads((tmp_path / "eval.json").read_text())

    image = str(tmp_path / "corpus" / "images" / "val_0000.pgm")
    assert main(["predict", "--ckpt", ckpt, image, "--out", str(tmp_path / "d.npy")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["count"] == pytest.approx(float(np.load(tmp_path / "d.npy").sum()), abs=1e-9)

    assert main(["localize", "--ckpt", ckpt, image]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l]
    assert all(len(l.split()) == 2 for l in lines)

    assert main(["diagnose-masks", "--ckpt", ckpt, "--limit", "1"]) == 0
    diag = json.loads(capsys.readouterr().out)
    assert len(diag["scenes"]) == 1 and len(diag["scenes"][0]["inherited"]) == 2
    assert "routing" in diag

    # read-only commands are idempotent
    assert main(["eval", "--ckpt", ckpt]) == 0
    assert json.loads(capsys.readouterr().out) == rep

    assert main(["predict", "--ckpt", ckpt, str(tmp_path / "nope.pgm")]) == 2
