"""``occmae`` command line: gen, pretrain, eval, ablate, gradcheck, export-encoder.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure
(NaN or failed gradient check), 5 I/O error.

``OMAE_THREADS`` caps the BLAS/OpenMP thread pools (default: library default).
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys

import numpy as np

from . import rng as rngs
from .config import load_config, parse_config_text
from .errors import ConfigError, NumericError, OccMAEError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5

log = logging.getLogger("occmae")


def _common(p):
    p.add_argument("--config", metavar="PATH", help="flat 'key = value' config file")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--grid", metavar="WxHxD", help="grid dims, e.g. 64x64x16")
    p.add_argument("--voxel-size", metavar="X,Y,Z")
    p.add_argument("--ratios", metavar="r1,r2,r3", help="masking ratio per range band")
    p.add_argument("--mask-mode", choices=("range_aware", "uniform"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss-mode", choices=("standard", "paper_literal"))
    p.add_argument("--deterministic", choices=("true", "false"))
    p.add_argument("--out", metavar="DIR", help="output directory")


FLAG_KEYS = {
    "seed": "seed",
    "grid": "grid",
    "voxel_size": "voxel_size",
    "ratios": "ratios",
    "mask_mode": "mask_mode",
    "epochs": "epochs",
    "loss_mode": "loss_mode",
    "deterministic": "deterministic",
}


def _overrides(args):
    out = {}
    for attr, key in FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = str(v)
    return out


def _file_values(args):
    if not args.config:
        return {}
    try:
        with open(args.config, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None


def resolve_config(args):
    """File values, then flags; ``paper_literal`` brings its own alpha/gamma unless set explicitly."""
    file_values = _file_values(args)
    overrides = _overrides(args)
    if overrides.get("loss_mode") == "paper_literal":
        overrides.setdefault("alpha", file_values.get("alpha", "2.0"))
        overrides.setdefault("gamma", file_values.get("gamma", "0.25"))
    cfg = load_config(None, {**file_values, **overrides})
    return cfg.validate()


def echo_config(cfg, out=None):
    out = out or sys.stdout
    out.write("# resolved config\n")
    out.write(cfg.dump())
    out.flush()


# --------------------------------------------------------------------------


def cmd_gen(args):
    from .scene import band_counts, band_index, generate_scene, random_scene_spec, write_points
    from .voxel import voxel_ranges, voxelize

    cfg = resolve_config(args)
    echo_config(cfg)
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    out = args.out or "data"
    os.makedirs(out, exist_ok=True)
    edges = cfg.mask.band_edges
    points = np.zeros(3, dtype=np.int64)
    voxels = np.zeros(3, dtype=np.int64)
    for i in range(args.count):
        spec = random_scene_spec(cfg.scene, rngs.derive_seed(cfg.seed, "scene", i), cfg.num_boxes)
        cloud = generate_scene(spec)
        write_points(cloud, os.path.join(out, f"scene_{i:05d}.bin"))
        points += band_counts(cloud, cfg.sensor_origin, edges)
        _, target = voxelize(cloud, cfg.grid)
        r = voxel_ranges(cfg.grid, target.occupied, cfg.sensor_origin, cfg.mask.range_metric)
        voxels += np.bincount(band_index(r, edges), minlength=3)
    print(f"wrote {args.count} scenes to {out}")
    if args.count:
        labels = (f"0-{edges[0]:g}m", f"{edges[0]:g}-{edges[1]:g}m", f">{edges[1]:g}m")
        print("band,points,points_per_scene,occupied_voxels,voxels_per_scene")
        for b in range(3):
            print(f"{labels[b]},{points[b]},{points[b] / args.count:.1f},"
                  f"{voxels[b]},{voxels[b] / args.count:.1f}")
    return EXIT_OK


def print_ladder(schedule):
    print("layer,dims,channels")
    for name, dims, ch in schedule.ladder():
        print(f"{name},{'x'.join(str(d) for d in dims)},{ch}")


def cmd_pretrain(args):
    from .model import build_schedule
    from .pretrain import train

    cfg = resolve_config(args)
    echo_config(cfg)
    schedule = build_schedule(cfg.grid.dims, cfg.positional)
    print_ladder(schedule)
    if args.dry_run:
        print("dry run: config and shape ladder valid, no training performed")
        return EXIT_OK
    if not args.data:
        raise ConfigError("pretrain needs --data DIR (or --dry-run)")
    out = args.out or "run"
    ckpt, rows = train(cfg, args.data, out, resume=args.resume)
    last = rows[-1] if rows else None
    print(f"trained {ckpt.meta['step']} steps over {ckpt.meta['epoch']} epochs; "
          f"checkpoint {os.path.join(out, 'last.ckpt')}")
    if last:
        print(f"final step loss {last[2]} masked_iou {last[4]}")
    return EXIT_OK


EVAL_COLUMNS = ("masked", "masked_band0", "masked_band1", "masked_band2", "visible", "overall")


def cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .pretrain import config_from_checkpoint, evaluate, load_scene_dir

    overrides = _overrides(args)
    seed = int(overrides.get("seed", 0))
    # load everything first so a bad file fails before any output
    ckpts = [(path, load_checkpoint(path)) for path in args.checkpoints]
    rows = []
    for path, ckpt in ckpts:
        # grid and schedule come from the checkpoint; evaluation masks from the command line
        mask_keys = {k: v for k, v in overrides.items() if k in ("ratios", "mask_mode")}
        cfg = config_from_checkpoint(ckpt).with_values({**mask_keys, "seed": str(seed)})
        cfg.validate()
        scenes = load_scene_dir(args.data, cfg.grid)
        metrics = evaluate(scenes, cfg, ckpt.schedule, ckpt.params)
        vals = [float(np.mean([m[c].iou for m in metrics])) for c in EVAL_COLUMNS]
        rows.append(f"{path},{ckpt.meta.get('epoch', '')}," + ",".join(f"{v:.6f}" for v in vals))
    print("checkpoint,epoch," + ",".join(f"{c}_iou" for c in EVAL_COLUMNS))
    print("\n".join(rows))
    return EXIT_OK


def cmd_ablate(args):
    from .ablation import load_ablation_spec, write_ablation

    try:
        with open(args.spec, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read ablation spec {args.spec}: {exc}") from None
    spec = load_ablation_spec(text=text, overrides=_overrides(args))
    echo_config(spec.base)
    print(f"# ablation axis {spec.axis}: {len(spec.values)} values x {len(spec.seeds)} seeds")
    path = write_ablation(spec, args.out or "ablation")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_all

    seed = args.seed if args.seed is not None else 0
    results = run_all(seed, include_model=not args.skip_model)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  rel_err {r.max_rel_error:.3e}  "
              f"tol {r.tolerance:.0e}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise NumericError(f"{len(failed)} gradient checks exceeded tolerance")
    return EXIT_OK


def cmd_export_encoder(args):
    from .checkpoint import export_encoder, load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    out = args.out or "encoder.omae"
    if os.path.isdir(out):
        out = os.path.join(out, "encoder.omae")
    export_encoder(ckpt, out)
    print(f"wrote encoder ({len(ckpt.schedule.encoder)} layers) to {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="occmae",
        description="Range-aware masked occupancy pre-training for LiDAR point clouds.",
        epilog="Environment: OMAE_THREADS caps the numeric thread pools.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write synthetic scenes as scene_NNNNN.bin")
    _common(p)
    p.add_argument("--count", type=int, default=20)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="pre-train the masked occupancy autoencoder")
    _common(p)
    p.add_argument("--data", metavar="DIR", help="directory of .bin point files")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.add_argument("--dry-run", action="store_true", help="validate config and print the shape ladder")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="masked-voxel IoU of one or more checkpoints")
    _common(p)
    p.add_argument("checkpoints", nargs="+", metavar="CKPT")
    p.add_argument("--data", metavar="DIR", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid from a spec file")
    _common(p)
    p.add_argument("spec", metavar="SPEC")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    _common(p)
    p.add_argument("--skip-model", action="store_true", help="layer checks only")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-encoder", help="write the encoder weights without the decoder")
    _common(p)
    p.add_argument("checkpoint", metavar="CKPT")
    p.set_defaults(func=cmd_export_encoder)
    return parser


def _thread_limit():
    raw = os.environ.get("OMAE_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"OMAE_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except OccMAEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
