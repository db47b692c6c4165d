"""The asymmetric occupancy autoencoder: sparse encoder, dense decoder."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError
from .nn import (
    LayerSpec,
    Params,
    build_rulebook,
    densify,
    densify_backward,
    init_params,
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
from .voxel import GridConfig, SparseVoxelTensor

ENCODER_CHANNELS = (16, 32, 64, 64, 128)
DECODER_CHANNELS = (32, 8, 1)
INPUT_CHANNELS = 4


def _split_three(ratio):
    """Factor ``ratio`` into three per-layer upsampling strides, largest first."""
    factors = []
    n, f = ratio, 2
    while n > 1:
        while n % f == 0:
            factors.append(f)
            n //= f
        f += 1
    strides = [1, 1, 1]
    for f in sorted(factors, reverse=True):
        i = int(np.argmin(strides))
        strides[i] *= f
    return sorted(strides, reverse=True)


@dataclass(frozen=True)
class Schedule:
    encoder: Tuple[LayerSpec, ...]
    decoder: Tuple[LayerSpec, ...]
    grid_dims: Tuple[int, int, int]
    positional: bool = True

    def ladder(self):
        """``[(layer name, output dims, channels)]`` from input to probabilities."""
        dims = self.grid_dims
        rows = [("input", dims, self.encoder[0].in_channels)]
        for spec in self.encoder + self.decoder:
            dims = spec.output_dims(dims)
            rows.append((spec.name, dims, spec.out_channels))
        return rows

    @property
    def latent_dims(self):
        dims = self.grid_dims
        for spec in self.encoder:
            dims = spec.output_dims(dims)
        return dims

    def validate(self):
        prev = self.encoder[0].in_channels
        for spec in self.encoder + self.decoder:
            if spec.in_channels != prev:
                raise ConfigError(
                    f"layer {spec.name!r} expects {spec.in_channels} channels, previous layer gives {prev}"
                )
            prev = spec.out_channels
        for spec in self.encoder:
            if spec.kind != "sparse_conv":
                raise ConfigError(f"encoder layer {spec.name!r} must be a sparse conv")
        for spec in self.decoder:
            if spec.kind != "transposed_conv":
                raise ConfigError(f"decoder layer {spec.name!r} must be a transposed conv")
        if prev != 1:
            raise ConfigError(f"decoder must end with 1 channel, got {prev}")
        final = self.ladder()[-1][1]
        if tuple(final) != tuple(self.grid_dims):
            raise ConfigError(
                f"shape ladder ends at {final}, expected the grid dims {self.grid_dims}"
            )
        expected_in = INPUT_CHANNELS + (3 if self.positional else 0)
        if self.encoder[0].in_channels != expected_in:
            raise ConfigError(
                f"first encoder layer needs {expected_in} input channels, has {self.encoder[0].in_channels}"
            )
        return self


def build_schedule(grid_dims, positional=True, encoder_channels=ENCODER_CHANNELS,
                   decoder_channels=DECODER_CHANNELS) -> Schedule:
    """Five-layer sparse encoder and three-layer transposed-conv decoder.

    Encoder: submanifold 3^3; three 3^3 stride-2 layers (the last one keeps z);
    then the (1,1,3) z-collapsing layer with stride (1,1,2). The decoder
    strides are chosen so the ladder returns exactly to ``grid_dims``; grids
    whose size is not a multiple of the encoder downsampling are rejected.
    """
    c = list(encoder_channels)
    cin = INPUT_CHANNELS + (3 if positional else 0)
    encoder = (
        LayerSpec("sparse_conv", (3, 3, 3), (1, 1, 1), cin, c[0], True, "enc1"),
        LayerSpec("sparse_conv", (3, 3, 3), (2, 2, 2), c[0], c[1], False, "enc2"),
        LayerSpec("sparse_conv", (3, 3, 3), (2, 2, 2), c[1], c[2], False, "enc3"),
        LayerSpec("sparse_conv", (3, 3, 3), (2, 2, 1), c[2], c[3], False, "enc4"),
        LayerSpec("sparse_conv", (1, 1, 3), (1, 1, 2), c[3], c[4], False, "enc5"),
    )
    dims = tuple(int(d) for d in grid_dims)
    latent = dims
    for spec in encoder:
        latent = spec.output_dims(latent)
    per_axis = []
    for g, l in zip(dims, latent):
        if g % l:
            raise ConfigError(
                f"grid dims {dims} do not divide evenly into latent dims {latent}; "
                "use multiples of (8, 8, 8)"
            )
        per_axis.append(_split_three(g // l))
    d = list(decoder_channels)
    prev = c[-1]
    decoder = []
    for i in range(3):
        stride = tuple(per_axis[a][i] for a in range(3))
        decoder.append(LayerSpec("transposed_conv", (3, 3, 3), stride, prev, d[i], False, f"dec{i + 1}"))
        prev = d[i]
    return Schedule(encoder, tuple(decoder), dims, positional).validate()


@dataclass
class ModelParams:
    encoder: List[Params]
    decoder: List[Params]

    def tensors(self):
        """Flat ``[(name, array)]`` in declaration order."""
        out = []
        for tag, group in (("enc", self.encoder), ("dec", self.decoder)):
            for i, p in enumerate(group):
                out.append((f"{tag}{i + 1}.weight", p.weight))
                out.append((f"{tag}{i + 1}.bias", p.bias))
        return out

    def copy(self):
        return ModelParams(
            [Params(p.weight.copy(), p.bias.copy()) for p in self.encoder],
            [Params(p.weight.copy(), p.bias.copy()) for p in self.decoder],
        )


def init_model(schedule: Schedule, rng: np.random.Generator) -> ModelParams:
    return ModelParams(
        [init_params(s, rng) for s in schedule.encoder],
        [init_params(s, rng) for s in schedule.decoder],
    )


def normalize_features(tensor: SparseVoxelTensor, grid: GridConfig) -> SparseVoxelTensor:
    """Rescale mean (x, y, z) to ``[0, 1]`` over the grid extents; intensity is kept."""
    lo = np.asarray(grid.min_corner)
    ext = np.asarray(grid.voxel_size) * np.asarray(grid.dims)
    feats = tensor.features.copy()
    feats[:, :3] = (feats[:, :3] - lo) / ext
    return SparseVoxelTensor(tensor.coords, feats, tensor.dims)


@dataclass
class ForwardCache:
    inputs: List[SparseVoxelTensor] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    rulebooks: list = field(default_factory=list)
    latent: Optional[SparseVoxelTensor] = None
    dense_in: List[np.ndarray] = field(default_factory=list)
    dense_pre: List[np.ndarray] = field(default_factory=list)


def encode(visible: SparseVoxelTensor, schedule: Schedule, params: ModelParams, cache=None):
    """Encoder forward on raw (already normalised) voxel features; returns the sparse latent."""
    x = positional_augment(visible) if schedule.positional else visible
    for spec, p in zip(schedule.encoder, params.encoder):
        rb = build_rulebook(x.coords, x.dims, spec)
        y = sparse_conv_forward(x, spec, p, rb)
        if cache is not None:
            cache.inputs.append(x)
            cache.pre.append(y.features)
            cache.rulebooks.append(rb)
        x = SparseVoxelTensor(y.coords, relu(y.features), y.dims)
    if cache is not None:
        cache.latent = x
    return x


def decode_logits(latent: SparseVoxelTensor, schedule: Schedule, params: ModelParams, cache=None):
    h = densify(latent)
    n = len(schedule.decoder)
    for i, (spec, p) in enumerate(zip(schedule.decoder, params.decoder)):
        z = transposed_conv_forward(h, spec, p)
        if cache is not None:
            cache.dense_in.append(h)
            cache.dense_pre.append(z)
        h = relu(z) if i < n - 1 else z
    return h


def forward_logits(visible, schedule, params, cache=None):
    return decode_logits(encode(visible, schedule, params, cache), schedule, params, cache)


def forward_model(visible: SparseVoxelTensor, schedule: Schedule, params: ModelParams):
    """Occupancy probabilities shaped ``(W, H, D, 1)``."""
    return sigmoid(forward_logits(visible, schedule, params))


def backward_model(schedule: Schedule, params: ModelParams, cache: ForwardCache, grad_logits):
    """Gradients of every parameter given ``dL/dlogits``; returns a :class:`ModelParams`."""
    dec_grads = [None] * len(schedule.decoder)
    g = np.asarray(grad_logits)
    n = len(schedule.decoder)
    for i in reversed(range(n)):
        if i < n - 1:
            g = relu_backward(cache.dense_pre[i], g)
        g, dec_grads[i] = transposed_conv_backward(
            cache.dense_in[i], schedule.decoder[i], params.decoder[i], g
        )
    g = densify_backward(cache.latent, g)
    enc_grads = [None] * len(schedule.encoder)
    for i in reversed(range(len(schedule.encoder))):
        g = relu_backward(cache.pre[i], g)
        g, enc_grads[i] = sparse_conv_backward(
            cache.inputs[i], schedule.encoder[i], params.encoder[i], g, cache.rulebooks[i]
        )
    return ModelParams(enc_grads, dec_grads)
