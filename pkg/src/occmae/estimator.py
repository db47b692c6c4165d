"""scikit-learn style front end to masked occupancy pre-training."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, _fmt
from .errors import DataError
from .model import build_schedule, encode, forward_model
from .nn import densify
from .pretrain import (
    checkpoint_from_state,
    config_from_checkpoint,
    evaluate,
    prepare,
    run_training,
    state_from_checkpoint,
)


def check_cloud(cloud):
    """Validate one point cloud: ``(N, 4)`` finite floats, N may be 0."""
    arr = check_array(cloud, dtype=np.float64, ensure_min_samples=0, ensure_all_finite=True)
    if arr.shape[1] != 4:
        raise DataError(f"point clouds need 4 columns (x, y, z, intensity), got {arr.shape[1]}")
    return arr


def check_clouds(X):
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    clouds = [check_cloud(c) for c in X]
    if not clouds:
        raise DataError("expected at least one point cloud")
    return clouds


class OccupancyMAE(TransformerMixin, BaseEstimator):
    """Masked occupancy autoencoder over LiDAR point clouds.

    ``fit`` pre-trains the sparse encoder and dense decoder on a list of
    ``(N, 4)`` point arrays by masking occupied voxels per range band and
    predicting the full occupancy grid. ``transform`` returns the flattened
    encoder latent of each (unmasked) cloud, ``predict_proba`` the occupancy
    probabilities and ``score`` the mean masked-voxel IoU.

    Parameters
    ----------
    grid_dims, voxel_size, min_corner : tuple
        Voxel grid. ``grid_dims`` must be a multiple of (8, 8, 8).
    ratios : tuple of 3 floats
        Masking ratio per range band (0-30 m, 30-50 m, >50 m by default).
    mask_mode : {"range_aware", "uniform"}
        ``uniform`` masks all occupied voxels at ``ratios[0]``.
    loss_mode : {"standard", "paper_literal"}
    scenes_per_epoch : int
        Samples drawn per epoch (with a fresh mask each); 0 means one pass
        over the clouds.
    random_state : int
        Root seed for initialisation, shuffling and masks.
    """

    def __init__(self, grid_dims=(64, 64, 16), voxel_size=(1.6, 1.6, 0.5),
                 min_corner=(-51.2, -51.2, -3.0), sensor_origin=(0.0, 0.0, 0.0),
                 ratios=(0.9, 0.7, 0.5), band_edges=(30.0, 50.0), mask_mode="range_aware",
                 range_metric="xy", positional=True, alpha=0.25, gamma=2.0,
                 loss_mode="standard", loss_region="all", epochs=3, batch_size=1,
                 learning_rate=1e-3, scenes_per_epoch=0, resample_mask_per_step=True,
                 threshold=0.5, random_state=0):
        self.grid_dims = grid_dims
        self.voxel_size = voxel_size
        self.min_corner = min_corner
        self.sensor_origin = sensor_origin
        self.ratios = ratios
        self.band_edges = band_edges
        self.mask_mode = mask_mode
        self.range_metric = range_metric
        self.positional = positional
        self.alpha = alpha
        self.gamma = gamma
        self.loss_mode = loss_mode
        self.loss_region = loss_region
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.scenes_per_epoch = scenes_per_epoch
        self.resample_mask_per_step = resample_mask_per_step
        self.threshold = threshold
        self.random_state = random_state

    def run_config(self) -> RunConfig:
        values = {
            "grid": "x".join(str(int(d)) for d in self.grid_dims),
            "voxel_size": _fmt(tuple(float(v) for v in self.voxel_size)),
            "min_corner": _fmt(tuple(float(v) for v in self.min_corner)),
            "sensor_origin": _fmt(tuple(float(v) for v in self.sensor_origin)),
            "ratios": _fmt(tuple(float(v) for v in self.ratios)),
            "band_edges": _fmt(tuple(float(v) for v in self.band_edges)),
            "mask_mode": self.mask_mode,
            "range_metric": self.range_metric,
            "positional": _fmt(bool(self.positional)),
            "alpha": repr(float(self.alpha)),
            "gamma": repr(float(self.gamma)),
            "loss_mode": self.loss_mode,
            "loss_region": self.loss_region,
            "epochs": str(self.epochs),
            "batch_size": str(self.batch_size),
            "learning_rate": repr(float(self.learning_rate)),
            "scenes_per_epoch": str(self.scenes_per_epoch),
            "resample_mask_per_step": _fmt(bool(self.resample_mask_per_step)),
            "threshold": repr(float(self.threshold)),
            "seed": str(int(self.random_state)),
        }
        return RunConfig().with_values(values).validate()

    def _prepare(self, X):
        grid = self.config_.grid if hasattr(self, "config_") else self.run_config().grid
        return [prepare(c, grid) for c in check_clouds(X)]

    def fit(self, X, y=None):
        self.config_ = self.run_config()
        self.schedule_ = build_schedule(self.config_.grid.dims, self.config_.positional)
        state = run_training(self._prepare(X), self.config_, self.schedule_)
        self.params_ = state.params
        self.adam_state_ = state.adam
        self.history_ = list(state.rows)
        self.n_steps_ = state.step
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        out = []
        for scene in self._prepare(X):
            latent = encode(scene.tensor, self.schedule_, self.params_)
            out.append(densify(latent).ravel())
        return np.stack(out)

    def predict_proba(self, X):
        """Occupancy probability grids, shape ``(n_clouds, W, H, D)``, from unmasked input."""
        check_is_fitted(self, "params_")
        return np.stack([forward_model(s.tensor, self.schedule_, self.params_)[..., 0]
                         for s in self._prepare(X)])

    def predict(self, X):
        return self.predict_proba(X) >= self.threshold

    def score_samples(self, X):
        """Per-cloud metrics under seeded evaluation masks."""
        check_is_fitted(self, "params_")
        return evaluate(self._prepare(X), self.config_, self.schedule_, self.params_)

    def score(self, X, y=None):
        """Mean masked-voxel occupancy IoU."""
        return float(np.mean([m.masked_iou for m in self.score_samples(X)]))

    def save(self, path):
        check_is_fitted(self, "params_")
        from .pretrain import TrainState

        state = TrainState(self.params_, self.adam_state_, self.config_.train.epochs, self.n_steps_,
                           self.history_)
        save_checkpoint(checkpoint_from_state(state, self.schedule_, self.config_), path)

    @classmethod
    def from_checkpoint(cls, path):
        ckpt = load_checkpoint(path)
        cfg = config_from_checkpoint(ckpt)
        est = cls(
            grid_dims=cfg.grid.dims, voxel_size=cfg.grid.voxel_size, min_corner=cfg.grid.min_corner,
            sensor_origin=cfg.scene.sensor_origin, ratios=cfg.mask.ratios,
            band_edges=cfg.mask.band_edges, mask_mode=cfg.mask.mode,
            range_metric=cfg.mask.range_metric, positional=cfg.positional, alpha=cfg.loss.alpha,
            gamma=cfg.loss.gamma, loss_mode=cfg.loss.mode, loss_region=cfg.train.loss_region,
            epochs=cfg.train.epochs, batch_size=cfg.train.batch_size,
            learning_rate=cfg.train.learning_rate, scenes_per_epoch=cfg.train.scenes_per_epoch,
            resample_mask_per_step=cfg.train.resample_mask_per_step,
            threshold=cfg.train.threshold, random_state=cfg.seed,
        )
        state = state_from_checkpoint(ckpt)
        est.config_ = cfg
        est.schedule_ = ckpt.schedule
        est.params_ = state.params
        est.adam_state_ = state.adam
        est.history_ = []
        est.n_steps_ = state.step
        return est
