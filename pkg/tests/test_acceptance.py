"""Acceptance criteria 1-8.

Each test records a one-line PASS/FAIL verdict in ``REPORT``; ``conftest.py``
prints the lines at the end of the session. Run this file directly for the
report alone: ``python tests/test_acceptance.py``.
"""
import itertools
import math
import os
import time

import numpy as np
import pytest

from occmae import rng as rngs
from occmae.ablation import EPOCHS_PRESET, MASK_RATIO_PRESET, load_ablation_spec, run_ablation
from occmae.checkpoint import checkpoint_bytes, encoder_bytes, export_encoder, import_encoder, load_checkpoint, save_checkpoint
from occmae.config import RunConfig
from occmae.errors import FormatError
from occmae.gradcheck import LAYER_TOL, MODEL_TOL, run_all
from occmae.loss import LossConfig, focal_loss
from occmae.masking import MaskConfig, expected_n_un, masked_count, plan_mask
from occmae.model import build_schedule, init_model
from occmae.nn import LayerSpec, Params, dense_conv_oracle, densify, sigmoid, sparse_conv_forward, transposed_conv_forward
from occmae.pretrain import (checkpoint_from_state, evaluate, new_state, prepare, run_training, smoothed,
                             state_from_checkpoint)
from occmae.scene import SceneSpec, generate_scene, random_scene_spec, read_points, write_points
from occmae.voxel import SparseVoxelTensor, voxelize

REPORT = {}


def record(n, ok, detail):
    REPORT[n] = f"{'PASS' if ok else 'FAIL'}  criterion {n}: {detail}"
    print(REPORT[n])
    return ok


# ---------------------------------------------------------------- 1


def test_1_masking_exactness():
    t0 = time.perf_counter()
    ratios = (0.9, 0.7, 0.5)
    cfg = RunConfig()
    bad = 0
    for i in range(100):
        spec = random_scene_spec(cfg.scene, rngs.derive_seed(1, "scene", i), cfg.num_boxes)
        _, target = voxelize(generate_scene(spec), cfg.grid)
        plan = plan_mask(target, cfg.grid, cfg.sensor_origin, MaskConfig(ratios=ratios, seed=i))
        want = tuple(int(math.floor(r * n + 0.5)) for r, n in zip(ratios, plan.band_counts))
        n_un = sum(n - m for n, m in zip(plan.band_counts, want))
        if plan.masked_counts != want or plan.n_un != n_un or n_un != expected_n_un(plan.band_counts, ratios):
            bad += 1
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < 10.0
    record(1, ok, f"100 scenes, {bad} count mismatches, {dt:.1f} s (limit 10 s)")
    assert ok


# ---------------------------------------------------------------- 2


def scatter_oracle(x, spec, params):
    """Literal transposed convolution: every input cell scatters through every tap."""
    X, Y, Z, _ = x.shape
    out_dims = spec.output_dims((X, Y, Z))
    out = np.zeros(out_dims + (spec.out_channels,))
    out[...] = params.bias
    px, py, pz = spec.padding
    for ix, iy, iz in itertools.product(range(X), range(Y), range(Z)):
        for dx, dy, dz in itertools.product(*(range(k) for k in spec.filter)):
            o = (ix * spec.stride[0] + dx - px, iy * spec.stride[1] + dy - py, iz * spec.stride[2] + dz - pz)
            if all(0 <= o[a] < out_dims[a] for a in range(3)):
                out[o] += x[ix, iy, iz] @ params.weight[dx, dy, dz]
    return out


def oracle_support(x, spec):
    """Active output sites: the input sites (submanifold) or every window touching one."""
    if spec.submanifold:
        return {tuple(v) for v in x.coords.tolist()}
    ind = LayerSpec("sparse_conv", spec.filter, spec.stride, 1, 1, False)
    hits = dense_conv_oracle(densify(SparseVoxelTensor(x.coords, np.ones((len(x), 1)), x.dims)), ind,
                             Params(np.ones(ind.weight_shape()), np.zeros(1)))
    return {tuple(v) for v in np.argwhere(hits[..., 0] > 0).tolist()}


def test_2_sparse_dense_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    desk = build_schedule((64, 64, 16))
    sparse_specs = [LayerSpec(s.kind, s.filter, s.stride, 3, 4, s.submanifold, s.name) for s in desk.encoder]
    # plus a regular (non-submanifold) stride-1 variant of the first layer
    sparse_specs.append(LayerSpec("sparse_conv", (3, 3, 3), (1, 1, 1), 3, 4, False, "regular"))
    trans_specs = [LayerSpec(s.kind, s.filter, s.stride, 4, 3, False, s.name) for s in desk.decoder]
    worst = 0.0
    support_bad = 0
    n_inst = 100
    for spec in sparse_specs:
        for _ in range(n_inst):
            dims = tuple(int(d) for d in rng.integers(2, 9, size=3))
            mask = rng.random(dims) < rng.uniform(0.05, 0.4)
            coords = np.argwhere(mask)
            x = SparseVoxelTensor(coords, rng.normal(size=(len(coords), 3)), dims)
            p = Params(rng.normal(size=spec.weight_shape()), rng.normal(size=4))
            y = sparse_conv_forward(x, spec, p)
            ref = dense_conv_oracle(densify(x), spec, p)
            c = y.coords
            if {tuple(v) for v in c.tolist()} != oracle_support(x, spec):
                support_bad += 1
            if len(c):
                worst = max(worst, float(np.abs(ref[c[:, 0], c[:, 1], c[:, 2]] - y.features).max()))
    for spec in trans_specs:
        for _ in range(n_inst):
            dims = tuple(int(d) for d in rng.integers(1, 5, size=3))
            x = rng.normal(size=dims + (4,))
            p = Params(rng.normal(size=spec.weight_shape()), rng.normal(size=3))
            worst = max(worst, float(np.abs(transposed_conv_forward(x, spec, p) - scatter_oracle(x, spec, p)).max()))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and support_bad == 0 and dt < 60.0
    record(2, ok, f"{n_inst} instances x {len(sparse_specs) + len(trans_specs)} layer specs, "
                  f"max |diff| {worst:.2e} (limit 1e-10), {support_bad} support mismatches, "
                  f"{dt:.1f} s (limit 60 s)")
    assert ok


# ---------------------------------------------------------------- 3


def test_3_gradient_integrity():
    t0 = time.perf_counter()
    results = run_all(seed=0, include_model=True)
    dt = time.perf_counter() - t0
    failed = [r for r in results if not r.passed]
    layer = max(r.max_rel_error for r in results if not r.name.startswith("model."))
    model = max(r.max_rel_error for r in results if r.name.startswith("model."))
    ok = not failed and layer <= LAYER_TOL and model <= MODEL_TOL and dt < 120.0
    record(3, ok, f"{len(results)} checks, worst layer rel err {layer:.2e} (limit 1e-5), "
                  f"worst end-to-end {model:.2e} (limit 1e-4), {dt:.1f} s (limit 120 s)"
                  + (f"; failed: {[r.name for r in failed]}" if failed else ""))
    assert ok


# ---------------------------------------------------------------- 4


def test_4_loss_correctness():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        alpha = float(rng.uniform(0.05, 0.95))
        logits = [rng.normal(scale=2, size=(6, 5, 4)) for _ in range(int(rng.integers(1, 4)))]
        occ = [rng.random(z.shape) < 0.3 for z in logits]
        loss, _, _ = focal_loss([sigmoid(z) for z in logits], occ, LossConfig(alpha=alpha, gamma=0.0))
        oracle = np.mean([np.where(t, alpha * np.logaddexp(0, -z), (1 - alpha) * np.logaddexp(0, z)).mean()
                          for z, t in zip(logits, occ)])
        worst = max(worst, abs(loss - oracle))
    single, _, _ = focal_loss([np.array([0.5])], [np.array([True])], LossConfig())
    err1 = abs(single - 0.25 * 0.25 * math.log(2))
    ok = worst <= 1e-12 and err1 <= 1e-12
    record(4, ok, f"gamma=0 vs BCE oracle max |diff| {worst:.1e}, single voxel |diff| {err1:.1e} (limit 1e-12)")
    assert ok


# ---------------------------------------------------------------- 5

LEARN_VALUES = {"epochs": "3", "scenes_per_epoch": "500", "learning_rate": "0.001", "seed": "0"}


def test_5_learning_happens():
    t0 = time.perf_counter()
    cfg = RunConfig().with_values(LEARN_VALUES).validate()
    assert cfg.grid.dims == (64, 64, 16)

    def scenes(n, offset):
        return [prepare(generate_scene(random_scene_spec(cfg.scene, rngs.derive_seed(cfg.seed, "scene", offset + i),
                                                         cfg.num_boxes)), cfg.grid) for i in range(n)]

    train, held_out = scenes(20, 0), scenes(5, 10_000)
    schedule = build_schedule(cfg.grid.dims)
    init = new_state(schedule, cfg.seed).params
    iou0 = float(np.mean([m.masked_iou for m in evaluate(held_out, cfg, schedule, init)]))
    state = run_training(train, cfg, schedule)
    iou1 = float(np.mean([m.masked_iou for m in evaluate(held_out, cfg, schedule, state.params)]))
    s = smoothed([r[2] for r in state.rows], window=10)
    drop = 1.0 - s[-1] / s[0]
    dt = time.perf_counter() - t0
    ok = iou1 >= 2.0 * iou0 and drop >= 0.5 and dt < 600
    record(5, ok, f"held-out masked IoU {iou0:.4f} -> {iou1:.4f} ({iou1 / max(iou0, 1e-12):.1f}x, need 2x), "
                  f"smoothed loss drop {100 * drop:.1f}% (need 50%), {state.step} steps, {dt:.0f} s (limit 600 s)")
    assert ok


# ---------------------------------------------------------------- 6

TINY = ("grid = 16x16x8\nvoxel_size = 6.4,6.4,1.0\nnum_rays = 2048\nepochs = 1\n"
        "train_scenes = 2\neval_scenes = 1\nseeds = 0,1\n")


def _grid_values(text):
    import csv
    import io

    body = "\n".join(l for l in text.splitlines() if not l.startswith("#"))
    rows = list(csv.DictReader(io.StringIO(body)))
    return [r["value"] for r in rows if r["seed"] == "summary"], rows


def test_6_ablation_fidelity():
    problems = []
    structures = {
        "mask_ratio": ["/".join(repr(float(v)) for v in r) for r in MASK_RATIO_PRESET],
        "epochs": [str(e) for e in EPOCHS_PRESET],
        "mask_mode": ["range_aware", "uniform", "uniform_matched"],
    }
    for axis, expected in structures.items():
        spec = load_ablation_spec(text=TINY + f"axis = {axis}\nvalues = preset\n")
        a, b = run_ablation(spec), run_ablation(spec)
        if a != b:
            problems.append(f"{axis}: two runs differ")
        values, rows = _grid_values(a)
        if values != expected:
            problems.append(f"{axis}: grid {values} != {expected}")
        if len(rows) != len(expected) * 3:
            problems.append(f"{axis}: {len(rows)} rows")
        if "NOT detection mAP" not in a.splitlines()[0]:
            problems.append(f"{axis}: header does not state the metric")
    ok = not problems
    record(6, ok, "ratio grid (8 rows), epochs {2,3,4}, range-aware vs uniform; byte-identical reruns"
                  + (f"; problems: {problems}" if problems else ""))
    assert ok


# ---------------------------------------------------------------- 7


def test_7_persistence(tmp_path):
    cfg = RunConfig().with_values({"grid": "16x16x8", "voxel_size": "6.4,6.4,1.0", "num_rays": "4096",
                                   "epochs": "3"})
    scenes = [prepare(generate_scene(random_scene_spec(cfg.scene, rngs.derive_seed(0, "scene", i), 8)), cfg.grid)
              for i in range(4)]
    schedule = build_schedule(cfg.grid.dims)
    full = run_training(scenes, cfg, schedule)

    ck = checkpoint_from_state(run_training(scenes, RunConfig().with_values({**cfg.to_values(), "epochs": "1"}),
                                            schedule), schedule, cfg)
    save_checkpoint(ck, tmp_path / "e1.ckpt")
    loaded = load_checkpoint(tmp_path / "e1.ckpt")
    ck_same = checkpoint_bytes(loaded) == (tmp_path / "e1.ckpt").read_bytes()

    export_encoder(loaded, tmp_path / "a.omae")
    enc = import_encoder(tmp_path / "a.omae", schedule)
    meta = {k: loaded.meta[k] for k in ("seed", "epoch")}
    enc_same = encoder_bytes(schedule, enc, meta) == (tmp_path / "a.omae").read_bytes()

    state = state_from_checkpoint(loaded)
    k = state.step
    resumed = run_training(scenes, cfg, schedule, state=state)
    steps_same = 0 < k < len(full.rows) and resumed.rows == full.rows[k:]
    params_same = all(a.tobytes() == b.tobytes()
                      for (_, a), (_, b) in zip(resumed.params.tensors(), full.params.tensors()))
    ok = ck_same and enc_same and steps_same and params_same
    record(7, ok, f"checkpoint round-trip identical={ck_same}, encoder export identical={enc_same}, "
                  f"resume matches uninterrupted run step-for-step={steps_same and params_same} "
                  f"(resumed at step {k} of {len(full.rows)})")
    assert ok


# ---------------------------------------------------------------- 8


def test_8_point_format(tmp_path):
    rng = np.random.default_rng(8)
    mismatches = 0
    path = tmp_path / "c.bin"
    for i in range(1000):
        n = int(rng.integers(0, 200))
        # random finite float32 bit patterns, including subnormals and extremes
        bits = rng.integers(0, 2**32, size=(n, 4), dtype=np.uint64).astype(np.uint32)
        cloud = bits.view(np.float32)
        cloud = np.where(np.isfinite(cloud), cloud, np.float32(1.5))
        write_points(cloud, path)
        if read_points(path).tobytes() != cloud.tobytes():
            mismatches += 1
    offsets_ok = True
    for size in (1, 15, 17, 16 * 7 + 9):
        path.write_bytes(b"\0" * size)
        try:
            read_points(path)
            offsets_ok = False
        except FormatError as exc:
            offsets_ok &= exc.offset == size - size % 16 and f"offset {size - size % 16}" in str(exc)
    ok = mismatches == 0 and offsets_ok
    record(8, ok, f"1000 random clouds, {mismatches} round-trip mismatches; malformed lengths rejected "
                  f"with byte offsets={offsets_ok}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([os.path.abspath(__file__), "-q", "-s"]))
