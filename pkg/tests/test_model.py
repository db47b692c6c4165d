import numpy as np
import pytest

from occmae.errors import ConfigError
from occmae.model import (
    ForwardCache,
    backward_model,
    build_schedule,
    encode,
    forward_logits,
    forward_model,
    init_model,
    normalize_features,
)
from occmae.nn import densify
from occmae.voxel import GridConfig, SparseVoxelTensor, voxelize


def test_desk_ladder():
    s = build_schedule((64, 64, 16))
    trace = [(name, dims, c) for name, dims, c in s.ladder()]
    assert trace[0] == ("input", (64, 64, 16), 7)
    assert trace[5] == ("enc5", (8, 8, 2), 128)
    assert trace[-1] == ("dec3", (64, 64, 16), 1)
    assert s.latent_dims == (8, 8, 2)
    assert [sp.stride for sp in s.decoder] == [(2, 2, 2)] * 3


def test_layer_typing():
    s = build_schedule((64, 64, 16))
    assert [sp.submanifold for sp in s.encoder] == [True, False, False, False, False]
    assert s.encoder[4].filter == (1, 1, 3) and s.encoder[4].stride == (1, 1, 2)
    assert [sp.out_channels for sp in s.encoder] == [16, 32, 64, 64, 128]


def test_small_grid_ladder():
    s = build_schedule((8, 8, 4))
    assert s.latent_dims == (1, 1, 1)
    assert s.ladder()[-1][1] == (8, 8, 4)


def test_no_positional_channels():
    assert build_schedule((16, 16, 8), positional=False).encoder[0].in_channels == 4


@pytest.mark.parametrize("dims", [(60, 64, 16), (64, 64, 9), (36, 64, 16)])
def test_indivisible_grid_rejected(dims):
    with pytest.raises(ConfigError):
        build_schedule(dims)


def _scene(rng, dims=(16, 16, 8), n=200):
    grid = GridConfig((0, 0, 0), (1, 1, 1), dims)
    cloud = np.column_stack([rng.uniform(0, 1, size=(n, 3)) * dims, rng.random(n)])
    tensor, _ = voxelize(cloud, grid)
    return normalize_features(tensor, grid), grid


def test_output_shape_and_range():
    rng = np.random.default_rng(0)
    x, grid = _scene(rng)
    s = build_schedule(grid.dims)
    p = init_model(s, rng)
    out = forward_model(x, s, p)
    assert out.shape == (16, 16, 8, 1)
    assert ((out > 0) & (out < 1)).all()


def test_empty_visible_is_bias_driven():
    s = build_schedule((16, 16, 8))
    rng = np.random.default_rng(1)
    p = init_model(s, rng)
    for q in p.decoder:
        q.bias[:] = rng.normal(size=q.bias.shape)
    empty = SparseVoxelTensor(np.zeros((0, 3)), np.zeros((0, 4)), (16, 16, 8))
    out = forward_model(empty, s, p)
    assert out.shape == (16, 16, 8, 1) and np.isfinite(out).all()
    assert len(encode(empty, s, p)) == 0


def test_normalized_features_in_unit_cube():
    rng = np.random.default_rng(2)
    x, _ = _scene(rng)
    assert (x.features[:, :3] >= 0).all() and (x.features[:, :3] < 1).all()


def test_latent_densify_shape():
    rng = np.random.default_rng(3)
    x, grid = _scene(rng)
    s = build_schedule(grid.dims)
    latent = encode(x, s, init_model(s, rng))
    assert densify(latent).shape == s.latent_dims + (128,)


def test_backward_returns_every_tensor():
    rng = np.random.default_rng(4)
    x, grid = _scene(rng, (8, 8, 4), 60)
    s = build_schedule(grid.dims)
    p = init_model(s, rng)
    cache = ForwardCache()
    logits = forward_logits(x, s, p, cache)
    g = backward_model(s, p, cache, rng.normal(size=logits.shape))
    for (n1, a), (n2, b) in zip(p.tensors(), g.tensors()):
        assert n1 == n2 and a.shape == b.shape
    assert [n for n, _ in p.tensors()][:2] == ["enc1.weight", "enc1.bias"]
