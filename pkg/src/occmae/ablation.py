"""Ablation grids over masking ratio, epochs, data amount and masking mode."""
from __future__ import annotations

import csv
import io
import os
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import rng as rngs
from .config import RunConfig, parse_config_text
from .errors import ConfigError, OccMAEError
from .masking import plan_mask
from .model import build_schedule
from .pretrain import evaluate, load_scene_dir, prepare, run_training, smoothed
from .scene import generate_scene, random_scene_spec

AXES = ("mask_ratio", "epochs", "data_amount", "mask_mode")

# masking-ratio rows (0-30 m, 30-50 m, >50 m)
MASK_RATIO_PRESET = (
    (0.5, 0.5, 0.5),
    (0.7, 0.5, 0.3),
    (0.7, 0.7, 0.7),
    (0.9, 0.7, 0.5),
    (0.9, 0.7, 0.7),
    (0.9, 0.9, 0.9),
    (0.95, 0.95, 0.95),
    (0.98, 0.98, 0.98),
)
EPOCHS_PRESET = (2, 3, 4)
# fractions of the training scenes, in the 1:2:3:4:5 proportion of the data-size sweep
DATA_AMOUNT_PRESET = (0.2, 0.4, 0.6, 0.8, 1.0)
# "uniform" masks everything at 0.9; "uniform_matched" at the overall fraction range-aware masking removes
MASK_MODE_PRESET = ("range_aware", "uniform", "uniform_matched")

PRESETS = {
    "mask_ratio": MASK_RATIO_PRESET,
    "epochs": EPOCHS_PRESET,
    "data_amount": DATA_AMOUNT_PRESET,
    "mask_mode": MASK_MODE_PRESET,
}

METRIC_NOTE = ("# metric: masked-voxel occupancy IoU at threshold {tau} on held-out synthetic scenes "
               "(desk-scale proxy; NOT detection mAP)")
COLUMNS = ("axis", "value", "seed", "status", "steps", "final_loss", "masked_iou",
           "masked_iou_0_30m", "masked_iou_30_50m", "masked_iou_50m_inf", "visible_iou", "overall_iou")
METRIC_COLUMNS = COLUMNS[5:]


@dataclass(frozen=True)
class AblationSpec:
    axis: str
    values: tuple
    base: RunConfig
    seeds: tuple = (0,)
    train_scenes: int = 20
    eval_scenes: int = 5
    data_dir: Optional[str] = None

    def validate(self):
        if self.axis not in AXES:
            raise ConfigError(f"axis: expected one of {AXES}, got {self.axis!r}")
        if len(self.values) < 1:
            raise ConfigError("values: need at least one grid point")
        if len(self.seeds) < 1:
            raise ConfigError("seeds: need at least one replicate seed")
        if self.train_scenes < 1 or self.eval_scenes < 1:
            raise ConfigError("train_scenes and eval_scenes must be >= 1")
        self.base.validate()
        with warnings.catch_warnings():
            # non-descending ratio rows are part of the grid on purpose
            warnings.simplefilter("ignore")
            for v in self.values:
                _cell_config(self.base, self.axis, v).validate()
        return self


def _parse_values(axis, text):
    text = str(text).strip()
    if text == "preset":
        return PRESETS[axis]
    items = [t.strip() for t in text.split(";") if t.strip()]
    if axis == "mask_ratio":
        out = []
        for item in items:
            r = tuple(float(v) for v in item.split(","))
            if len(r) == 1:
                r = r * 3
            if len(r) != 3:
                raise ConfigError(f"mask_ratio value {item!r}: need 1 or 3 ratios")
            out.append(r)
        return tuple(out)
    if axis == "epochs":
        return tuple(int(v) for v in items)
    if axis == "data_amount":
        return tuple(float(v) for v in items)
    return tuple(items)


ABLATION_KEYS = ("axis", "values", "seeds", "train_scenes", "eval_scenes", "data_dir")


def load_ablation_spec(path=None, text=None, overrides=None) -> AblationSpec:
    """Read an ablation spec: ablation keys plus any run-config keys as the base."""
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    values = parse_config_text(text or "")
    values.update(overrides or {})
    own = {k: values.pop(k) for k in ABLATION_KEYS if k in values}
    if "axis" not in own:
        raise ConfigError("ablation spec needs an 'axis' key")
    axis = own["axis"]
    if axis not in AXES:
        raise ConfigError(f"axis: expected one of {AXES}, got {axis!r}")
    try:
        spec = AblationSpec(
            axis=axis,
            values=_parse_values(axis, own.get("values", "preset")),
            base=RunConfig().with_values(values),
            seeds=tuple(int(s) for s in str(own.get("seeds", "0")).split(",")),
            train_scenes=int(own.get("train_scenes", 20)),
            eval_scenes=int(own.get("eval_scenes", 5)),
            data_dir=own.get("data_dir") or None,
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed ablation spec: {exc}") from None
    return spec.validate()


def _value_label(value):
    if isinstance(value, tuple):
        return "/".join(repr(float(v)) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _cell_config(base: RunConfig, axis, value, matched_ratio=None) -> RunConfig:
    if axis == "mask_ratio":
        cfg = replace(base, mask=replace(base.mask, ratios=tuple(float(v) for v in value), mode="range_aware"))
    elif axis == "epochs":
        cfg = replace(base, train=replace(base.train, epochs=int(value)))
    elif axis == "data_amount":
        if not (0 < float(value) <= 1):
            raise ConfigError(f"data_amount value {value!r} must lie in (0, 1]")
        cfg = base
    elif axis == "mask_mode":
        if value == "range_aware":
            cfg = replace(base, mask=replace(base.mask, mode="range_aware"))
        elif value == "uniform":
            r = base.mask.ratios[0]
            cfg = replace(base, mask=replace(base.mask, mode="uniform", ratios=(r, r, r)))
        elif value == "uniform_matched":
            r = base.mask.ratios[0] if matched_ratio is None else matched_ratio
            cfg = replace(base, mask=replace(base.mask, mode="uniform", ratios=(r, r, r)))
        else:
            raise ConfigError(f"mask_mode value {value!r} not in {MASK_MODE_PRESET}")
    else:
        raise ConfigError(f"unknown axis {axis!r}")
    return cfg


def _matched_ratio(scenes, cfg: RunConfig):
    """Overall masked fraction that range-aware masking produces on ``scenes``."""
    masked = total = 0
    for s in scenes:
        plan = plan_mask(s.target, cfg.grid, cfg.sensor_origin, replace(cfg.mask, mode="range_aware"))
        masked += len(plan.masked)
        total += s.target.n_occupied
    return masked / total if total else cfg.mask.ratios[0]


def synthetic_scenes(cfg: RunConfig, count, offset=0):
    out = []
    for i in range(count):
        spec = random_scene_spec(cfg.scene, rngs.derive_seed(cfg.seed, "scene", offset + i), cfg.num_boxes)
        out.append(prepare(generate_scene(spec), cfg.grid))
    return out


EVAL_OFFSET = 1_000_000


def _run_cell(spec: AblationSpec, value, seed, train, held_out, matched):
    cfg = _cell_config(spec.base, spec.axis, value, matched)
    cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
    scenes = train
    if spec.axis == "data_amount":
        scenes = train[:max(1, int(round(float(value) * len(train))))]
    schedule = build_schedule(cfg.grid.dims, cfg.positional)
    state = run_training(scenes, cfg, schedule)
    metrics = evaluate(held_out, cfg, schedule, state.params)
    losses = [r[2] for r in state.rows]

    def mean(key):
        return float(np.mean([m[key].iou for m in metrics]))

    return {
        "steps": state.step,
        "final_loss": float(smoothed(losses)[-1]),
        "masked_iou": mean("masked"),
        "masked_iou_0_30m": mean("masked_band0"),
        "masked_iou_30_50m": mean("masked_band1"),
        "masked_iou_50m_inf": mean("masked_band2"),
        "visible_iou": mean("visible"),
        "overall_iou": mean("overall"),
    }


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def run_ablation(spec: AblationSpec, train_scenes=None, eval_scenes=None) -> str:
    """Run every (value, seed) cell and return the CSV text.

    One row per cell, then one ``summary`` row per value with ``mean±sd``
    over seeds. A failing cell is recorded with its error and skipped.
    """
    spec.validate()
    base = spec.base
    if train_scenes is None:
        if spec.data_dir:
            all_scenes = load_scene_dir(spec.data_dir, base.grid)
            train_scenes = all_scenes[:spec.train_scenes]
            eval_scenes = all_scenes[spec.train_scenes:spec.train_scenes + spec.eval_scenes]
            if not eval_scenes:
                raise OccMAEError(f"{spec.data_dir} holds no scenes beyond the {spec.train_scenes} training scenes")
        else:
            train_scenes = synthetic_scenes(base, spec.train_scenes)
    if eval_scenes is None:
        eval_scenes = synthetic_scenes(base, spec.eval_scenes, EVAL_OFFSET)
    matched = _matched_ratio(train_scenes, base) if spec.axis == "mask_mode" else None

    buf = io.StringIO()
    buf.write(METRIC_NOTE.format(tau=base.train.threshold) + "\n")
    if matched is not None:
        buf.write(f"# uniform_matched ratio: {matched!r}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for value in spec.values:
        results = []
        for seed in spec.seeds:
            try:
                res = _run_cell(spec, value, seed, train_scenes, eval_scenes, matched)
                status = "ok"
                results.append(res)
            except OccMAEError as exc:
                res, status = {}, f"error: {exc}"
            writer.writerow([spec.axis, _value_label(value), seed, status, res.get("steps", "")]
                            + [_fmt(res[k]) if k in res else "" for k in METRIC_COLUMNS])
        summary = []
        for k in METRIC_COLUMNS:
            vals = [r[k] for r in results]
            summary.append(f"{np.mean(vals):.6f}±{np.std(vals):.6f}" if vals else "")
        writer.writerow([spec.axis, _value_label(value), "summary", f"{len(results)}/{len(spec.seeds)} ok", ""]
                        + summary)
    return buf.getvalue()


def write_ablation(spec: AblationSpec, out_dir, **kwargs):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"ablation_{spec.axis}.csv")
    text = run_ablation(spec, **kwargs)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path
