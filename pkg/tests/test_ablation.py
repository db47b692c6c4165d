import csv
import io

import pytest

import occmae.ablation as ablation
from occmae.ablation import (
    EPOCHS_PRESET,
    MASK_MODE_PRESET,
    MASK_RATIO_PRESET,
    load_ablation_spec,
    run_ablation,
    write_ablation,
)
from occmae.errors import ConfigError, NumericError

TINY = """
grid = 16x16x8
voxel_size = 6.4,6.4,1.0
num_rays = 2048
epochs = 1
train_scenes = 2
eval_scenes = 1
"""


def parse(text):
    lines = text.splitlines()
    comments = [l for l in lines if l.startswith("#")]
    rows = list(csv.DictReader(io.StringIO("\n".join(l for l in lines if not l.startswith("#")))))
    return comments, rows


def test_ratio_preset_rows():
    assert MASK_RATIO_PRESET == (
        (0.5, 0.5, 0.5), (0.7, 0.5, 0.3), (0.7, 0.7, 0.7), (0.9, 0.7, 0.5),
        (0.9, 0.7, 0.7), (0.9, 0.9, 0.9), (0.95, 0.95, 0.95), (0.98, 0.98, 0.98))
    assert EPOCHS_PRESET == (2, 3, 4)


def test_single_point_single_seed():
    spec = load_ablation_spec(text=TINY + "axis = mask_ratio\nvalues = 0.9,0.7,0.5\nseeds = 0\n")
    comments, rows = parse(run_ablation(spec))
    assert len(rows) == 2
    assert rows[0]["seed"] == "0" and rows[0]["status"] == "ok"
    assert rows[1]["seed"] == "summary" and "±" in rows[1]["masked_iou"]
    assert any("masked-voxel occupancy IoU" in c and "NOT detection mAP" in c for c in comments)


def test_mask_mode_columns():
    spec = load_ablation_spec(text=TINY + "axis = mask_mode\nseeds = 0\n")
    comments, rows = parse(run_ablation(spec))
    assert [r["value"] for r in rows if r["seed"] != "summary"] == list(MASK_MODE_PRESET)
    assert any(c.startswith("# uniform_matched ratio") for c in comments)


def test_deterministic_bytes(tmp_path):
    spec = load_ablation_spec(text=TINY + "axis = epochs\nvalues = 1;2\nseeds = 0,1\n")
    a = write_ablation(spec, tmp_path / "a")
    b = write_ablation(spec, tmp_path / "b")
    assert open(a, "rb").read() == open(b, "rb").read()
    _, rows = parse(open(a).read())
    assert len(rows) == 2 * 2 + 2


def test_data_amount_subsets():
    spec = load_ablation_spec(text=TINY.replace("train_scenes = 2", "train_scenes = 5")
                              + "axis = data_amount\nvalues = 0.2;1.0\n")
    _, rows = parse(run_ablation(spec))
    steps = [int(r["steps"]) for r in rows if r["seed"] != "summary"]
    assert steps == [1, 5]


def test_failed_cell_recorded(monkeypatch):
    real = ablation.run_training

    def flaky(scenes, cfg, schedule=None, **kw):
        if cfg.mask.ratios == (0.5, 0.5, 0.5):
            raise NumericError("non-finite gradient in enc1.weight")
        return real(scenes, cfg, schedule, **kw)

    monkeypatch.setattr(ablation, "run_training", flaky)
    spec = load_ablation_spec(text=TINY + "axis = mask_ratio\nvalues = 0.5;0.9,0.7,0.5\n")
    _, rows = parse(run_ablation(spec))
    assert rows[0]["status"].startswith("error: non-finite") and rows[0]["masked_iou"] == ""
    assert rows[1]["status"] == "0/1 ok"
    assert rows[2]["status"] == "ok"


@pytest.mark.parametrize("text", [
    "values = 1\n",
    "axis = speed\n",
    "axis = data_amount\nvalues = 1.5\n",
    "axis = mask_mode\nvalues = sometimes\n",
    "axis = epochs\nvalues = 0\n",
    "axis = mask_ratio\nvalues = 0.5,0.5\n",
])
def test_invalid_specs(text):
    with pytest.raises(ConfigError):
        load_ablation_spec(text=TINY + text)
