import csv
import logging

import numpy as np
import pytest

from conftest import small_clouds, small_config
from occmae.checkpoint import load_checkpoint
from occmae.errors import ConfigError, DataError
from occmae.pretrain import METRICS_HEADER, evaluate, run_training, smoothed, train
from occmae.scene import write_points


def _params_bytes(state):
    return b"".join(a.tobytes() for _, a in state.params.tensors())


def test_seeded_determinism(small_cfg, small_scenes):
    a = run_training(small_scenes, small_cfg)
    b = run_training(small_scenes, small_cfg)
    assert _params_bytes(a) == _params_bytes(b)
    assert a.rows == b.rows
    assert a.step == 2 * len(small_scenes)


def test_seed_changes_run(small_scenes):
    a = run_training(small_scenes, small_config(seed=1))
    b = run_training(small_scenes, small_config(seed=2))
    assert _params_bytes(a) != _params_bytes(b)


def test_rows_shape(small_cfg, small_scenes):
    state = run_training(small_scenes, small_cfg)
    assert len(state.rows[0]) == len(METRICS_HEADER)
    epochs = [r[0] for r in state.rows]
    assert epochs == sorted(epochs) and set(epochs) == {0, 1}
    assert all(np.isfinite(r[2]) for r in state.rows)


def test_resume_equals_uninterrupted(small_cfg, small_scenes):
    full = run_training(small_scenes, small_cfg)
    first = run_training(small_scenes, small_config(epochs=1))
    assert first.epoch == 1
    resumed = run_training(small_scenes, small_cfg, state=first)
    assert resumed.rows == full.rows
    assert _params_bytes(resumed) == _params_bytes(full)


def test_fixed_mask_mode(small_scenes):
    cfg = small_config(resample_mask_per_step="false")
    assert run_training(small_scenes, cfg).step == 8


def test_masked_loss_region(small_scenes):
    state = run_training(small_scenes, small_config(loss_region="masked", epochs=1))
    assert all(np.isfinite(r[2]) for r in state.rows)


def test_evaluate_deterministic(small_cfg, small_scenes):
    state = run_training(small_scenes, small_config(epochs=1))
    from occmae.model import build_schedule

    s = build_schedule(small_cfg.grid.dims)
    a = evaluate(small_scenes, small_cfg, s, state.params)
    b = evaluate(small_scenes, small_cfg, s, state.params)
    assert [m.masked_iou for m in a] == [m.masked_iou for m in b]


def test_epochs_zero_rejected():
    with pytest.raises(ConfigError, match="epochs"):
        small_config(epochs=0)


def test_no_scenes(small_cfg):
    with pytest.raises(DataError):
        run_training([], small_cfg)


def test_smoothed():
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])


def _write_data(tmp_path, cfg, n=3):
    d = tmp_path / "data"
    d.mkdir()
    for i, c in enumerate(small_clouds(cfg, n)):
        write_points(c, d / f"scene_{i:05d}.bin")
    return d


def test_train_writes_outputs_and_resumes(tmp_path, small_cfg):
    data = _write_data(tmp_path, small_cfg)
    ck, rows = train(small_cfg, data, tmp_path / "full")
    assert ck.meta["epoch"] == 2 and len(rows) == 6
    for name in ("epoch_000.ckpt", "epoch_001.ckpt", "epoch_002.ckpt", "last.ckpt", "metrics.csv"):
        assert (tmp_path / "full" / name).exists()
    with open(tmp_path / "full" / "metrics.csv") as fh:
        assert tuple(next(csv.reader(fh))) == METRICS_HEADER

    # interrupted after epoch 1: copy that state and a metrics file with extra rows logged past it
    part = tmp_path / "part"
    train(small_config(epochs=1), data, part)
    with open(part / "metrics.csv", "a") as fh:
        fh.write("1,3,999.0,0,0.0,0.0,0\n")
    ck2, rows2 = train(small_cfg, data, part, resume=part / "epoch_001.ckpt")
    assert rows2 == rows
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
    a = load_checkpoint(tmp_path / "full" / "last.ckpt")
    b = load_checkpoint(part / "last.ckpt")
    for (_, x), (_, y) in zip(a.params.tensors(), b.params.tensors()):
        assert x.tobytes() == y.tobytes()


def test_unreadable_scene_skipped(tmp_path, small_cfg, caplog):
    data = _write_data(tmp_path, small_cfg, 2)
    (data / "scene_bad.bin").write_bytes(b"\0" * 17)
    with caplog.at_level(logging.WARNING):
        _, rows = train(small_config(epochs=1), data, tmp_path / "out")
    assert len(rows) == 2
    assert "scene_bad.bin" in caplog.text


def test_all_unreadable(tmp_path, small_cfg):
    d = tmp_path / "bad"
    d.mkdir()
    (d / "a.bin").write_bytes(b"\0" * 5)
    with pytest.raises(DataError, match="unreadable"):
        train(small_cfg, d, tmp_path / "out")
    with pytest.raises(DataError):
        train(small_cfg, tmp_path / "out", tmp_path / "out2")
