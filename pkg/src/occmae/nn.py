"""Sparse 3D convolution, dense transposed convolution and their gradients.

Weights have shape ``(kx, ky, kz, C_in, C_out)``. All convolutions zero-pad by
``k // 2`` per axis, so a strided convolution maps ``n`` cells to
``ceil(n / s)`` and a transposed convolution maps ``n`` cells to ``n * s``.
Dense tensors are numpy arrays shaped ``(W, H, D, C)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import BoundsError, ConfigError, ConsistencyError
from .voxel import SparseVoxelTensor, ravel_coords, unravel_index

LAYER_KINDS = ("sparse_conv", "transposed_conv")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filter: Tuple[int, int, int]
    stride: Tuple[int, int, int]
    in_channels: int
    out_channels: int
    submanifold: bool = False
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "filter", tuple(int(v) for v in self.filter))
        object.__setattr__(self, "stride", tuple(int(v) for v in self.stride))
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"layer {self.name!r}: kind must be one of {LAYER_KINDS}")
        if len(self.filter) != 3 or len(self.stride) != 3:
            raise ConfigError(f"layer {self.name!r}: filter and stride need 3 components")
        if min(self.filter) < 1 or min(self.stride) < 1:
            raise ConfigError(f"layer {self.name!r}: filter and stride must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"layer {self.name!r}: channels must be >= 1")
        if self.submanifold:
            if self.kind != "sparse_conv":
                raise ConfigError(f"layer {self.name!r}: only sparse convs can be submanifold")
            if any(k % 2 == 0 for k in self.filter):
                raise ConfigError(f"layer {self.name!r}: submanifold filter must be odd")
            if self.stride != (1, 1, 1):
                raise ConfigError(f"layer {self.name!r}: submanifold stride must be 1")

    @property
    def padding(self):
        return tuple(k // 2 for k in self.filter)

    @property
    def kernel_volume(self):
        kx, ky, kz = self.filter
        return kx * ky * kz

    def output_dims(self, dims):
        dims = tuple(int(d) for d in dims)
        if self.kind == "transposed_conv":
            return tuple(d * s for d, s in zip(dims, self.stride))
        if self.submanifold:
            return dims
        return tuple(-(-d // s) for d, s in zip(dims, self.stride))

    def weight_shape(self):
        return self.filter + (self.in_channels, self.out_channels)


@dataclass
class Params:
    weight: np.ndarray
    bias: np.ndarray

    def check(self, spec: LayerSpec):
        if self.weight.shape != spec.weight_shape() or self.bias.shape != (spec.out_channels,):
            raise ConsistencyError(
                f"layer {spec.name!r}: params {self.weight.shape}/{self.bias.shape} do not match "
                f"{spec.weight_shape()}/({spec.out_channels},)"
            )


def init_params(spec: LayerSpec, rng: np.random.Generator, dtype=np.float64) -> Params:
    """Glorot-uniform weights, zero bias."""
    fan_in = spec.kernel_volume * spec.in_channels
    fan_out = spec.kernel_volume * spec.out_channels
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=spec.weight_shape()).astype(dtype)
    return Params(w, np.zeros(spec.out_channels, dtype=dtype))


def kernel_offsets(filter_):
    return np.array(list(itertools.product(*(range(k) for k in filter_))), dtype=np.int64)


# --------------------------------------------------------------------------
# sparse convolution


@dataclass
class Rulebook:
    """Per kernel tap, the (input row, output row) pairs it connects."""

    out_coords: np.ndarray
    out_dims: Tuple[int, int, int]
    in_rows: List[np.ndarray]
    out_rows: List[np.ndarray]


def _check_sparse_input(inp: SparseVoxelTensor, spec: LayerSpec):
    if spec.kind != "sparse_conv":
        raise ConfigError(f"layer {spec.name!r} is not a sparse conv")
    if inp.n_channels != spec.in_channels:
        raise ConsistencyError(
            f"layer {spec.name!r}: expected {spec.in_channels} input channels, got {inp.n_channels}"
        )
    if len(inp) and ((inp.coords < 0).any() or (inp.coords >= np.asarray(inp.dims)).any()):
        raise BoundsError(f"layer {spec.name!r}: input coordinate outside dims {inp.dims}")


def build_rulebook(coords, dims, spec: LayerSpec) -> Rulebook:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    dims = tuple(int(d) for d in dims)
    out_dims = spec.output_dims(dims)
    stride = np.asarray(spec.stride)
    pad = np.asarray(spec.padding)
    offsets = kernel_offsets(spec.filter)

    if spec.submanifold:
        out_coords = coords
    elif len(coords) == 0:
        out_coords = np.zeros((0, 3), dtype=np.int64)
    else:
        # output o reaches input i through tap d when i = o*s + d - p
        shifted = coords[:, None, :] + pad - offsets[None, :, :]
        q, r = np.divmod(shifted, stride)
        ok = (r == 0).all(axis=2) & (q >= 0).all(axis=2) & (q < np.asarray(out_dims)).all(axis=2)
        out_coords = unravel_index(np.unique(ravel_coords(q[ok], out_dims)), out_dims)

    in_keys = ravel_coords(coords, dims)
    order = np.argsort(in_keys, kind="stable")
    sorted_keys = in_keys[order]
    in_rows, out_rows = [], []
    for d in offsets:
        src = out_coords * stride + d - pad
        inside = ((src >= 0) & (src < np.asarray(dims))).all(axis=1)
        cand = np.flatnonzero(inside)
        keys = ravel_coords(src[cand], dims)
        pos = np.searchsorted(sorted_keys, keys)
        hit = pos < len(sorted_keys)
        hit[hit] = sorted_keys[pos[hit]] == keys[hit]
        in_rows.append(order[pos[hit]])
        out_rows.append(cand[hit])
    return Rulebook(out_coords, out_dims, in_rows, out_rows)


def sparse_conv_forward(inp: SparseVoxelTensor, spec: LayerSpec, params: Params,
                        rulebook: Rulebook = None) -> SparseVoxelTensor:
    """Gather / matmul / scatter over the rule book.

    Submanifold layers keep the input support; strided layers emit every
    output site whose kernel window covers at least one input voxel.
    """
    _check_sparse_input(inp, spec)
    params.check(spec)
    if rulebook is None:
        rulebook = build_rulebook(inp.coords, inp.dims, spec)
    w = params.weight.reshape(-1, spec.in_channels, spec.out_channels)
    out = np.tile(params.bias, (len(rulebook.out_coords), 1))
    for tap, (ir, orow) in enumerate(zip(rulebook.in_rows, rulebook.out_rows)):
        if len(ir):
            # within one tap every output row appears at most once
            out[orow] += inp.features[ir] @ w[tap]
    return SparseVoxelTensor(rulebook.out_coords, out, rulebook.out_dims)


def sparse_conv_backward(inp: SparseVoxelTensor, spec: LayerSpec, params: Params,
                         grad_out, rulebook: Rulebook = None):
    """Returns ``(grad_input_features, Params(grad_weight, grad_bias))``."""
    if rulebook is None:
        rulebook = build_rulebook(inp.coords, inp.dims, spec)
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (len(rulebook.out_coords), spec.out_channels):
        raise ConsistencyError(
            f"layer {spec.name!r}: upstream grad shape {grad_out.shape} != "
            f"{(len(rulebook.out_coords), spec.out_channels)}"
        )
    w = params.weight.reshape(-1, spec.in_channels, spec.out_channels)
    grad_in = np.zeros_like(inp.features)
    grad_w = np.zeros_like(w)
    for tap, (ir, orow) in enumerate(zip(rulebook.in_rows, rulebook.out_rows)):
        if len(ir):
            g = grad_out[orow]
            grad_w[tap] = inp.features[ir].T @ g
            grad_in[ir] += g @ w[tap].T
    return grad_in, Params(grad_w.reshape(spec.weight_shape()), grad_out.sum(axis=0))


def dense_conv_oracle(x, spec: LayerSpec, params: Params):
    """Direct nested-loop convolution of a dense ``(W, H, D, C)`` array.

    Reference only: no gathering tricks, every output cell visits every tap.
    Output dims are ``ceil(n / s)`` (``n`` when ``submanifold``).
    """
    x = np.asarray(x, dtype=np.float64)
    X, Y, Z, _ = x.shape
    OX, OY, OZ = spec.output_dims((X, Y, Z))
    kx, ky, kz = spec.filter
    sx, sy, sz = spec.stride
    px, py, pz = spec.padding
    w, b = params.weight, params.bias
    out = np.empty((OX, OY, OZ, spec.out_channels))
    for ox in range(OX):
        for oy in range(OY):
            for oz in range(OZ):
                acc = b.copy()
                for dx in range(kx):
                    ix = ox * sx + dx - px
                    if ix < 0 or ix >= X:
                        continue
                    for dy in range(ky):
                        iy = oy * sy + dy - py
                        if iy < 0 or iy >= Y:
                            continue
                        for dz in range(kz):
                            iz = oz * sz + dz - pz
                            if iz < 0 or iz >= Z:
                                continue
                            acc = acc + x[ix, iy, iz] @ w[dx, dy, dz]
                out[ox, oy, oz] = acc
    return out


# --------------------------------------------------------------------------
# dense transposed convolution


def _tap_slices(n_in, n_out, s, d, p):
    """Input range ``[lo, hi)`` and output slice for one tap along one axis."""
    # output index i = o*s + d - p must lie in [0, n_out)
    lo = max(0, -(-(p - d) // s))
    hi = min(n_in, (n_out - 1 - d + p) // s + 1)
    if hi <= lo:
        return None
    start = lo * s + d - p
    return slice(lo, hi), slice(start, start + (hi - lo - 1) * s + 1, s)


def _taps(spec, in_dims, out_dims):
    for d in kernel_offsets(spec.filter):
        sl = [_tap_slices(n, m, s, int(dd), p)
              for n, m, s, dd, p in zip(in_dims, out_dims, spec.stride, d, spec.padding)]
        if any(v is None for v in sl):
            continue
        yield tuple(d), tuple(v[0] for v in sl), tuple(v[1] for v in sl)


def _check_transposed(x, spec, params):
    if spec.kind != "transposed_conv":
        raise ConfigError(f"layer {spec.name!r} is not a transposed conv")
    if x.ndim != 4 or x.shape[3] != spec.in_channels:
        raise ConsistencyError(
            f"layer {spec.name!r}: expected (W, H, D, {spec.in_channels}) input, got {x.shape}"
        )
    params.check(spec)


def transposed_conv_forward(x, spec: LayerSpec, params: Params):
    """Adjoint of the strided convolution with the same filter and stride, plus bias."""
    x = np.asarray(x)
    _check_transposed(x, spec, params)
    in_dims = x.shape[:3]
    out_dims = spec.output_dims(in_dims)
    out = np.empty(out_dims + (spec.out_channels,), dtype=np.result_type(x, params.weight))
    out[...] = params.bias
    for d, src, dst in _taps(spec, in_dims, out_dims):
        out[dst] += x[src] @ params.weight[d]
    return out


def transposed_conv_backward(x, spec: LayerSpec, params: Params, grad_out):
    x = np.asarray(x)
    in_dims = x.shape[:3]
    out_dims = spec.output_dims(in_dims)
    grad_out = np.asarray(grad_out)
    if grad_out.shape != out_dims + (spec.out_channels,):
        raise ConsistencyError(
            f"layer {spec.name!r}: upstream grad shape {grad_out.shape} != "
            f"{out_dims + (spec.out_channels,)}"
        )
    grad_in = np.zeros_like(x, dtype=np.result_type(x, grad_out))
    grad_w = np.zeros_like(params.weight)
    cin, cout = spec.in_channels, spec.out_channels
    for d, src, dst in _taps(spec, in_dims, out_dims):
        g = grad_out[dst]
        grad_in[src] += g @ params.weight[d].T
        grad_w[d] = x[src].reshape(-1, cin).T @ g.reshape(-1, cout)
    return grad_in, Params(grad_w, grad_out.sum(axis=(0, 1, 2)))


# --------------------------------------------------------------------------
# glue ops


def densify(inp: SparseVoxelTensor):
    out = np.zeros(tuple(inp.dims) + (inp.n_channels,), dtype=inp.features.dtype)
    if len(inp):
        out[inp.coords[:, 0], inp.coords[:, 1], inp.coords[:, 2]] = inp.features
    return out


def densify_backward(inp: SparseVoxelTensor, grad_dense):
    c = inp.coords
    return np.asarray(grad_dense)[c[:, 0], c[:, 1], c[:, 2]]


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad):
    return np.where(np.asarray(x) > 0.0, grad, 0.0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def positional_augment(inp: SparseVoxelTensor) -> SparseVoxelTensor:
    """Append the voxel center normalised to ``[0, 1]`` along each grid axis."""
    pos = (inp.coords + 0.5) / np.asarray(inp.dims, dtype=np.float64)
    return SparseVoxelTensor(inp.coords, np.hstack([inp.features, pos]), inp.dims)


def positional_augment_backward(grad):
    return np.asarray(grad)[:, :-3]
