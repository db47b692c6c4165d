"""Central finite-difference checks of every analytic backward pass."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngs
from .loss import LossConfig, focal_loss
from .model import ForwardCache, backward_model, build_schedule, forward_logits, init_model
from .nn import (
    LayerSpec,
    Params,
    densify,
    densify_backward,
    positional_augment,
    positional_augment_backward,
    relu,
    relu_backward,
    sigmoid,
    sparse_conv_backward,
    sparse_conv_forward,
    transposed_conv_backward,
    transposed_conv_forward,
)
from .voxel import SparseVoxelTensor

FD_EPS = 1e-6
MODEL_EPS = 1e-5
LAYER_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def dot(a, b):
    """Exactly rounded inner product, so finite differences see only the perturbed terms."""
    return math.fsum((np.asarray(a) * np.asarray(b)).ravel())


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float((np.abs(a - b) / den).max())


def numeric_grad(f, arr, indices=None, eps=FD_EPS, pattern=None, min_eps=1e-9):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (perturbed in place).

    With ``pattern`` (a callable returning the ReLU sign pattern) a step
    that straddles a kink is retried at eps/10.
    """
    flat = arr.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    for i in indices:
        orig = flat[i]
        h = eps
        while True:
            flat[i] = orig + h
            fp = f()
            sp = pattern() if pattern else None
            flat[i] = orig - h
            fm = f()
            sm = pattern() if pattern else None
            flat[i] = orig
            if pattern is None or np.array_equal(sp, sm) or h / 10 < min_eps:
                break
            h /= 10
        out.append((fp - fm) / (2.0 * h))
    return np.asarray(out)


def _sample(size, k, rng):
    return np.sort(rng.choice(size, size=min(k, size), replace=False))


def _positive(rng, shape):
    # same-sign values keep every sum free of cancellation, so FD roundoff stays tiny
    return rng.uniform(0.5, 1.5, size=shape)


def random_sparse(rng, dims, channels, density=0.3, positive=False):
    mask = rng.random(dims) < density
    if not mask.any():
        mask[tuple(rng.integers(0, d) for d in dims)] = True
    coords = np.argwhere(mask)
    shape = (len(coords), channels)
    feats = _positive(rng, shape) if positive else rng.normal(size=shape)
    return SparseVoxelTensor(coords, feats, dims)


def check_sparse_conv(spec: LayerSpec, rng, dims=(4, 4, 4), max_entries=200, name=None):
    x = random_sparse(rng, dims, spec.in_channels, positive=True)
    p = Params(_positive(rng, spec.weight_shape()), _positive(rng, (spec.out_channels,)))
    out = sparse_conv_forward(x, spec, p)
    g = _positive(rng, out.features.shape)

    def f():
        return dot(sparse_conv_forward(x, spec, p).features, g)

    gx, gp = sparse_conv_backward(x, spec, p, g)
    results = []
    for label, arr, analytic in (("input", x.features, gx), ("weight", p.weight, gp.weight),
                                 ("bias", p.bias, gp.bias)):
        idx = _sample(arr.size, max_entries, rng)
        results.append(CheckResult(f"{name or spec.name}.{label}",
                                   rel_error(analytic.ravel()[idx], numeric_grad(f, arr, idx)),
                                   LAYER_TOL))
    return results


def check_transposed_conv(spec: LayerSpec, rng, dims=(3, 3, 2), max_entries=200, name=None):
    x = _positive(rng, tuple(dims) + (spec.in_channels,))
    p = Params(_positive(rng, spec.weight_shape()), _positive(rng, (spec.out_channels,)))
    g = _positive(rng, transposed_conv_forward(x, spec, p).shape)

    def f():
        return dot(transposed_conv_forward(x, spec, p), g)

    gx, gp = transposed_conv_backward(x, spec, p, g)
    results = []
    for label, arr, analytic in (("input", x, gx), ("weight", p.weight, gp.weight),
                                 ("bias", p.bias, gp.bias)):
        idx = _sample(arr.size, max_entries, rng)
        results.append(CheckResult(f"{name or spec.name}.{label}",
                                   rel_error(analytic.ravel()[idx], numeric_grad(f, arr, idx)),
                                   LAYER_TOL))
    return results


def check_elementwise(rng):
    results = []
    # keep samples away from the ReLU kink
    x = rng.normal(size=(6, 5))
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    g = rng.normal(size=x.shape)
    results.append(CheckResult("relu", rel_error(relu_backward(x, g),
                                                 numeric_grad(lambda: dot(relu(x), g), x)),
                               LAYER_TOL))

    t = random_sparse(rng, (4, 3, 2), 3)
    gd = rng.normal(size=(4, 3, 2, 3))
    results.append(CheckResult(
        "densify",
        rel_error(densify_backward(t, gd), numeric_grad(lambda: dot(densify(t), gd), t.features)),
        LAYER_TOL))

    gp = rng.normal(size=(len(t), 6))
    results.append(CheckResult(
        "positional_augment",
        rel_error(positional_augment_backward(gp),
                  numeric_grad(lambda: dot(positional_augment(t).features, gp), t.features)),
        LAYER_TOL))

    z = rng.normal(size=(3, 3, 3))
    occ = rng.random(z.shape) < 0.3
    for cfg in (LossConfig(), LossConfig(alpha=0.5, gamma=0.0), LossConfig.paper_literal()):
        _, grads, _ = focal_loss([sigmoid(z)], [occ], cfg)
        num = numeric_grad(lambda: focal_loss([sigmoid(z)], [occ], cfg)[0], z)
        results.append(CheckResult(f"focal_loss[{cfg.mode},a={cfg.alpha},g={cfg.gamma}]",
                                   rel_error(grads[0], num), LAYER_TOL))
    return results


def check_model(rng, grid_dims=(8, 8, 4), entries_per_tensor=12, loss_cfg=None, eps=MODEL_EPS,
                weight_scale=3.0):
    """End-to-end loss gradient of the full autoencoder on a small grid.

    Weights are scaled up from the Glorot init so gradients sit well above
    the loss roundoff; steps crossing a ReLU kink are retried smaller.
    """
    loss_cfg = loss_cfg or LossConfig()
    schedule = build_schedule(grid_dims)
    params = init_model(schedule, rng)
    for p in params.encoder + params.decoder:
        p.weight *= weight_scale
        p.bias[:] = rng.normal(scale=0.1, size=p.bias.shape)
    visible = random_sparse(rng, grid_dims, schedule.encoder[0].in_channels - 3, density=0.3)
    visible.features[:] = rng.random(visible.features.shape)
    truth = (rng.random(tuple(grid_dims) + (1,)) < 0.2)

    def loss():
        return focal_loss([sigmoid(forward_logits(visible, schedule, params))], [truth], loss_cfg)[0]

    def pattern():
        c = ForwardCache()
        forward_logits(visible, schedule, params, c)
        return np.concatenate([(a > 0).ravel() for a in c.pre + c.dense_pre[:-1]])

    cache = ForwardCache()
    probs = sigmoid(forward_logits(visible, schedule, params, cache))
    _, grads, _ = focal_loss([probs], [truth], loss_cfg)
    analytic = backward_model(schedule, params, cache, grads[0])
    results = []
    for (name, arr), (_, g) in zip(params.tensors(), analytic.tensors()):
        idx = _sample(arr.size, entries_per_tensor, rng)
        results.append(CheckResult(f"model.{name}", rel_error(g.ravel()[idx],
                                                              numeric_grad(loss, arr, idx, eps, pattern)),
                                   MODEL_TOL))
    return results


def layer_suite_specs():
    """Every layer type of the desk schedule plus a submanifold 5^3 variant."""
    s = build_schedule((64, 64, 16))
    small = []
    for spec in s.encoder:
        small.append(LayerSpec(spec.kind, spec.filter, spec.stride, 2, 3, spec.submanifold, spec.name))
    small.append(LayerSpec("sparse_conv", (5, 3, 3), (1, 1, 1), 2, 3, True, "subm533"))
    tsmall = [LayerSpec("transposed_conv", spec.filter, spec.stride, 3, 2, False, spec.name)
              for spec in s.decoder]
    tsmall.append(LayerSpec("transposed_conv", (3, 3, 3), (2, 2, 1), 3, 2, False, "dec_z1"))
    return small, tsmall


def run_all(seed=0, include_model=True):
    rng = rngs.generator(seed, "gradcheck")
    sparse_specs, trans_specs = layer_suite_specs()
    results = []
    for spec in sparse_specs:
        results += check_sparse_conv(spec, rng)
    for spec in trans_specs:
        results += check_transposed_conv(spec, rng)
    results += check_elementwise(rng)
    if include_model:
        results += check_model(rng)
    return results
