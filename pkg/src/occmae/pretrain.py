"""Pre-training loop, evaluation and the file-based ``train`` entry point."""
from __future__ import annotations

import csv
import glob
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from . import rng as rngs
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .errors import DataError, OccMAEError
from .loss import focal_loss
from .masking import MaskPlan, apply_mask, plan_mask
from .metrics import OccMetrics, score, voxel_bands
from .model import (
    ForwardCache,
    ModelParams,
    Schedule,
    backward_model,
    build_schedule,
    forward_logits,
    init_model,
    normalize_features,
)
from .nn import sigmoid
from .optim import AdamState, adam_step
from .scene import read_points
from .voxel import GridConfig, OccupancyTarget, SparseVoxelTensor, voxelize

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "step", "loss", "clamp_count", "masked_iou", "visible_iou", "seed")


@dataclass
class PreparedScene:
    tensor: SparseVoxelTensor  # normalised features
    target: OccupancyTarget
    truth: np.ndarray  # dense bool (W, H, D, 1)


def prepare(cloud, grid: GridConfig) -> PreparedScene:
    tensor, target = voxelize(cloud, grid)
    truth = target.to_dense(grid.dims)[..., None]
    return PreparedScene(normalize_features(tensor, grid), target, truth)


@dataclass
class TrainState:
    params: ModelParams
    adam: AdamState
    epoch: int = 0  # next epoch to run
    step: int = 0  # global step counter
    rows: List[tuple] = field(default_factory=list)


def new_state(schedule: Schedule, seed: int) -> TrainState:
    params = init_model(schedule, rngs.generator(seed, "init"))
    return TrainState(params, AdamState.zeros_like([a for _, a in params.tensors()]))


def _arrays(params: ModelParams):
    return [a for _, a in params.tensors()]


def mask_scene(scene: PreparedScene, cfg: RunConfig, seed: int):
    plan = plan_mask(scene.target, cfg.grid, cfg.sensor_origin, replace(cfg.mask, seed=seed))
    return apply_mask(scene.tensor, plan), plan


def train_step(batch: List[PreparedScene], seeds, schedule, state: TrainState, cfg: RunConfig, bands):
    """One optimiser step over ``batch``; returns the metrics row values."""
    caches, probs, plans, weights = [], [], [], []
    for scene, seed in zip(batch, seeds):
        visible, plan = mask_scene(scene, cfg, seed)
        cache = ForwardCache()
        probs.append(sigmoid(forward_logits(visible, schedule, state.params, cache)))
        caches.append(cache)
        plans.append(plan)
        if cfg.train.loss_region == "masked":
            hidden = np.ones(scene.target.n_voxels, dtype=bool)
            hidden[plan.visible] = False
            weights.append(hidden.reshape(scene.truth.shape))
    loss, grads, clamps = focal_loss(probs, [s.truth for s in batch], cfg.loss,
                                     weights if weights else None)
    total = None
    for cache, g in zip(caches, grads):
        pg = _arrays(backward_model(schedule, state.params, cache, g))
        total = pg if total is None else [a + b for a, b in zip(total, pg)]
    names = [n for n, _ in state.params.tensors()]
    adam_step(_arrays(state.params), total, state.adam, cfg.train.learning_rate,
              cfg.train.betas, cfg.train.eps, names)
    m_iou = [score(p, s.target, plan, cfg.train.threshold, bands=bands).masked_iou
             for p, s, plan in zip(probs, batch, plans)]
    v_iou = [score(p, s.target, plan, cfg.train.threshold, bands=bands).visible_iou
             for p, s, plan in zip(probs, batch, plans)]
    return loss, clamps, float(np.mean(m_iou)), float(np.mean(v_iou))


def run_training(scenes: List[PreparedScene], cfg: RunConfig, schedule: Schedule = None,
                 state: Optional[TrainState] = None,
                 on_step: Optional[Callable] = None,
                 on_epoch_end: Optional[Callable] = None) -> TrainState:
    """Train from ``state`` (fresh when ``None``) until ``cfg.train.epochs`` epochs are done.

    All randomness is derived from ``cfg.seed`` and the (epoch, step) cursor,
    so resuming from any epoch boundary reproduces an uninterrupted run.
    """
    cfg.validate()
    if not scenes:
        raise DataError("no training scenes")
    schedule = schedule or build_schedule(cfg.grid.dims, cfg.positional)
    state = state or new_state(schedule, cfg.seed)
    tc = cfg.train
    bands = voxel_bands(cfg.grid, cfg.sensor_origin, cfg.mask.band_edges, cfg.mask.range_metric)
    n_per_epoch = tc.scenes_per_epoch or len(scenes)
    for epoch in range(state.epoch, tc.epochs):
        order = rngs.generator(cfg.seed, "shuffle", epoch).permutation(len(scenes))
        order = np.resize(order, n_per_epoch) if n_per_epoch > len(scenes) else order[:n_per_epoch]
        for start in range(0, len(order), tc.batch_size):
            idx = [int(i) for i in order[start:start + tc.batch_size]]
            if tc.resample_mask_per_step:
                seeds = [rngs.derive_seed(cfg.seed, "mask", epoch, state.step, i) for i in idx]
            else:
                seeds = [rngs.derive_seed(cfg.seed, "mask", 0, 0, i) for i in idx]
            loss, clamps, m_iou, v_iou = train_step([scenes[i] for i in idx], seeds, schedule,
                                                    state, cfg, bands)
            row = (epoch, state.step, loss, clamps, m_iou, v_iou, cfg.seed)
            state.rows.append(row)
            state.step += 1
            if on_step is not None:
                on_step(row)
        state.epoch = epoch + 1
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state


def evaluate(scenes: List[PreparedScene], cfg: RunConfig, schedule: Schedule, params: ModelParams,
             threshold=None) -> List[OccMetrics]:
    """Score ``params`` on ``scenes`` with evaluation masks fixed by ``cfg.seed`` and scene order."""
    threshold = cfg.train.threshold if threshold is None else threshold
    bands = voxel_bands(cfg.grid, cfg.sensor_origin, cfg.mask.band_edges, cfg.mask.range_metric)
    out = []
    for i, scene in enumerate(scenes):
        visible, plan = mask_scene(scene, cfg, rngs.derive_seed(cfg.seed, "eval_mask", i))
        probs = sigmoid(forward_logits(visible, schedule, params))
        out.append(score(probs, scene.target, plan, threshold, bands=bands))
    return out


def smoothed(values, window=10):
    """Trailing moving average (shorter windows at the start)."""
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# --------------------------------------------------------------------------
# file-based entry point


def load_scene_dir(data_dir, grid: GridConfig) -> List[PreparedScene]:
    paths = sorted(glob.glob(os.path.join(data_dir, "*.bin")))
    if not paths:
        raise DataError(f"no .bin point files in {data_dir}")
    scenes = []
    for path in paths:
        try:
            scenes.append(prepare(read_points(path), grid))
        except (OSError, DataError) as exc:
            log.warning("skipping unreadable scene %s: %s", path, exc)
    if not scenes:
        raise DataError(f"all {len(paths)} scene files in {data_dir} are unreadable")
    return scenes


def format_row(row):
    return [repr(v) if isinstance(v, float) else str(v) for v in row]


def checkpoint_from_state(state: TrainState, schedule: Schedule, cfg: RunConfig) -> Checkpoint:
    meta = {
        "config": cfg.to_values(),
        "epoch": state.epoch,
        "step": state.step,
        "metrics_rows": len(state.rows),
        "seed": cfg.seed,
    }
    return Checkpoint(schedule, state.params, state.adam, meta)


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    return TrainState(ckpt.params, ckpt.adam, ckpt.meta["epoch"], ckpt.meta["step"])


def config_from_checkpoint(ckpt: Checkpoint) -> RunConfig:
    return RunConfig().with_values(ckpt.meta["config"])


def train(cfg: RunConfig, data_dir, out_dir, resume=None):
    """Train on every ``.bin`` in ``data_dir``.

    Writes ``epoch_000.ckpt`` (initial weights) on a fresh run, ``epoch_NNN.ckpt`` after each epoch, ``last.ckpt`` and an
    append-only ``metrics.csv``. Returns ``(checkpoint, metrics rows)``.
    """
    cfg.validate()
    scenes = load_scene_dir(data_dir, cfg.grid)
    schedule = build_schedule(cfg.grid.dims, cfg.positional)
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    state = None
    if resume:
        ckpt = load_checkpoint(resume)
        if ckpt.schedule != schedule:
            raise OccMAEError("resume checkpoint was trained with a different layer schedule")
        state = state_from_checkpoint(ckpt)
        rows_kept = ckpt.meta["metrics_rows"]
        # drop rows logged after the checkpoint so the file matches an uninterrupted run
        if os.path.exists(metrics_path):
            with open(metrics_path, newline="") as fh:
                lines = fh.read().splitlines(keepends=True)
            with open(metrics_path, "w", newline="") as fh:
                fh.writelines(lines[:1 + rows_kept])
        state.rows = [None] * rows_kept
    if state is None or not os.path.exists(metrics_path):
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)
    if state is None:
        state = new_state(schedule, cfg.seed)
        # the untrained model, as a baseline for evaluation
        save_checkpoint(checkpoint_from_state(state, schedule, cfg), os.path.join(out_dir, "epoch_000.ckpt"))

    def on_step(row):
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(format_row(row))
        log.info("epoch %d step %d loss %.6f masked_iou %.4f", row[0], row[1], row[2], row[4])

    def on_epoch_end(st):
        ckpt = checkpoint_from_state(st, schedule, cfg)
        save_checkpoint(ckpt, os.path.join(out_dir, f"epoch_{st.epoch:03d}.ckpt"))
        save_checkpoint(ckpt, os.path.join(out_dir, "last.ckpt"))

    state = run_training(scenes, cfg, schedule, state, on_step, on_epoch_end)
    with open(metrics_path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return checkpoint_from_state(state, schedule, cfg), rows
