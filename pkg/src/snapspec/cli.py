"""``snapspec`` command line: simulate, reconstruct, eval, plot, train, census."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .baselines import SolverConfig, gap_tv_solve, pgd_tv_solve
from .cassi import OperatorRep, simulate_measurement
from .config import MICRO, load_config, save_config
from .hsi_data import (
    generate_synthetic_scene,
    load_cube,
    load_mask,
    load_measurement,
    random_mask,
    save_cube,
    save_mask,
    save_measurement,
)
from .training import (
    TrainConfig,
    build_model,
    evaluate,
    load_checkpoint,
    reconstruct,
    save_checkpoint,
    tensor_to_cube,
    train,
)
from .unfolding import RDLUF, parameter_census

log = logging.getLogger("snapspec")

MANIFEST_NAME = "manifest.json"


def write_manifest(path: Path, command: str, *, config=None, inputs=None, outputs=None, seed=None, **extra) -> Path:
    manifest = {
        "command": command,
        "config": None if config is None else str(config),
        "inputs": {k: str(v) for k, v in (inputs or {}).items() if v is not None},
        "outputs": {k: str(v) for k, v in (outputs or {}).items()},
        "seed": seed,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    manifest.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _dims(text: str) -> tuple[int, int, int]:
    try:
        h, w, c = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxWxC, got {text!r}") from None
    return h, w, c


def _roi(text: str) -> tuple[int, int, int, int]:
    try:
        r0, r1, c0, c1 = (int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected row0,row1,col0,col1, got {text!r}") from None
    if r1 <= r0 or c1 <= c0:
        raise argparse.ArgumentTypeError(f"empty ROI {text!r}")
    return r0, r1, c0, c1


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    if args.synthetic is not None:
        h, w, c = args.synthetic
        cube = generate_synthetic_scene(h, w, c, seed=args.seed)
    else:
        cube = load_cube(args.scene)
    if args.mask is not None:
        mask = load_mask(args.mask)
    else:
        mask = random_mask(cube.height, cube.width, seed=args.seed, kind=args.mask_kind)
    meas = simulate_measurement(cube, mask, step=args.step, noise_bits=args.noise_bits, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"measurement": out / "measurement.hsic", "mask": out / "mask.hsic", "truth": out / "truth.hsic"}
    save_measurement(meas, paths["measurement"])
    save_mask(mask, paths["mask"])
    save_cube(cube, paths["truth"])
    write_manifest(
        out / MANIFEST_NAME, "simulate", inputs={"scene": args.scene, "mask": args.mask}, outputs=paths,
        seed=args.seed, bands=cube.bands, step=args.step, synthetic=args.synthetic is not None,
        noise_meta=meas.noise_meta,
    )
    print(f"measurement {meas.data.shape[0]}x{meas.data.shape[1]} -> {paths['measurement']}")
    return 0


def cmd_reconstruct(args) -> int:
    meas = load_measurement(args.measurement)
    mask = load_mask(args.mask)
    if args.method == "rdluf":
        model = load_checkpoint(args.checkpoint)
        bands, step = model.config.bands, model.config.step
    else:
        bands, step = args.bands, args.step
    op = OperatorRep.from_mask(mask, bands, step, dtype=torch.float64)
    if meas.data.shape != (op.height, op.sensor_width):
        raise ValueError(
            f"measurement {meas.data.shape} does not match mask {mask.data.shape} with {bands} bands, step {step}"
        )
    if args.method == "rdluf":
        cube = reconstruct(model, meas.data, mask)
    else:
        y = torch.from_numpy(meas.data.astype(np.float64))
        cfg = SolverConfig(iterations=args.iterations, tv_weight=args.tv_weight)
        solver = gap_tv_solve if args.method == "gaptv" else pgd_tv_solve
        cube = tensor_to_cube(solver(y, op, cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cube(cube, out)
    write_manifest(
        out.with_name(out.stem + ".manifest.json"), "reconstruct", config=args.checkpoint,
        inputs={"measurement": args.measurement, "mask": args.mask, "checkpoint": args.checkpoint},
        outputs={"cube": out}, method=args.method, bands=bands, step=step,
        iterations=None if args.method == "rdluf" else args.iterations,
    )
    print(f"{args.method}: {cube.height}x{cube.width}x{cube.bands} -> {out}")
    return 0


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.truth):
        raise ValueError(f"{len(args.pred)} predictions but {len(args.truth)} ground-truth cubes")
    names = args.names or [Path(p).stem for p in args.pred]
    if len(names) != len(args.pred):
        raise ValueError("need one name per prediction")
    report = evaluate([load_cube(p) for p in args.pred], [load_cube(t) for t in args.truth], names, roi=args.roi)
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        write_manifest(
            out.with_name(out.stem + ".manifest.json"), "eval",
            inputs={f"pred{i}": p for i, p in enumerate(args.pred)} | {f"truth{i}": t for i, t in enumerate(args.truth)},
            outputs={"report": out}, roi=args.roi,
        )
    return 0


def cmd_plot(args) -> int:
    from . import plots

    out_dir = Path(args.out_dir)
    outputs = {}
    sources = {"cube": args.cube, "pred": args.pred, "truth": args.truth}
    cubes = {name: load_cube(path).data for name, path in sources.items() if path is not None}
    if not cubes and not args.residual_viz:
        raise ValueError("nothing to plot: pass --cube, --pred/--truth or --residual-viz")
    for name, data in cubes.items():
        bands = plots.pick_bands(data.shape[2], args.bands)
        outputs[f"{name}_bands"] = plots.band_grid(data, bands, out_dir / f"{name}_bands.png", title=name)
    extra = {}
    if "pred" in cubes and "truth" in cubes:
        roi = args.roi or (0, cubes["truth"].shape[0], 0, cubes["truth"].shape[1])
        path, corr = plots.spectral_curves(cubes["pred"], cubes["truth"], roi, out_dir / "spectra.png")
        outputs["spectra"] = path
        extra["spectral_corr"] = corr
        print(f"spectral correlation {corr:.6f}")
    if args.residual_viz:
        if not (args.checkpoint and args.measurement and args.mask):
            raise ValueError("--residual-viz needs --checkpoint, --measurement and --mask")
        model = load_checkpoint(args.checkpoint)
        degradation = model.stage(0).degradation
        if degradation is None:
            raise ValueError("checkpoint has no residual degradation module")
        dtype = next(model.parameters()).dtype
        op = OperatorRep.from_mask(load_mask(args.mask), model.config.bands, model.config.step, dtype=dtype)
        y = torch.from_numpy(load_measurement(args.measurement).data).to(dtype)
        with torch.no_grad():
            phi_hat = degradation(y, op).shifted_mask[0]
        b = args.viz_band
        if not 0 <= b < op.bands:
            raise ValueError(f"--viz-band {b} outside 0..{op.bands - 1}")
        phi = op.shifted_mask[b].numpy()
        outputs["operator_maps"] = plots.operator_maps(phi, phi_hat[b].numpy() - phi, phi_hat[b].numpy(),
                                                       out_dir / "operator_maps.png")
    write_manifest(out_dir / MANIFEST_NAME, "plot", config=args.checkpoint,
                   inputs=dict(sources, checkpoint=args.checkpoint, measurement=args.measurement, mask=args.mask),
                   outputs=outputs, roi=args.roi, **extra)
    for path in outputs.values():
        print(path)
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config) if args.config else MICRO
    if args.stages is not None:
        config = config.replace(stages=args.stages)
    if args.scenes:
        scenes = [load_cube(p) for p in args.scenes]
    else:
        scenes = [generate_synthetic_scene(args.scene_size, args.scene_size, config.bands, seed=args.seed + i)
                  for i in range(args.synthetic_scenes)]
    if any(s.bands != config.bands for s in scenes):
        raise ValueError(f"training scenes must have {config.bands} bands")
    patch = args.patch_size
    size = (patch, patch) if patch is not None else (scenes[0].height, scenes[0].width)
    mask = load_mask(args.mask) if args.mask else random_mask(*size, seed=args.seed)
    tc = TrainConfig(
        epochs=args.epochs, steps_per_epoch=args.steps, peak_lr=args.lr, warmup_steps=args.warmup,
        batch_size=args.batch_size, patch_size=patch, seed=args.seed, augment=not args.no_augment,
        noise_bits=args.noise_bits,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(config, seed=args.seed)
    result = train(model, scenes, mask, tc, checkpoint_dir=out / "checkpoints" if args.save_epochs else None)
    paths = {"model": out / "model.pt", "log": out / "train_log.csv", "config": out / "config.yaml",
             "mask": out / "mask.hsic"}
    save_checkpoint(model, paths["model"], steps=tc.total_steps, seed=args.seed)
    paths["log"].write_text(result.log_text())
    save_config(config, paths["config"])
    save_mask(mask, paths["mask"])
    write_manifest(out / MANIFEST_NAME, "train", config=args.config,
                   inputs={f"scene{i}": p for i, p in enumerate(args.scenes or [])} | {"mask": args.mask},
                   outputs=paths, seed=args.seed, steps=tc.total_steps, final_loss=result.losses[-1])
    print(f"trained {tc.total_steps} steps, final loss {result.losses[-1]:.6f} -> {paths['model']}")
    return 0


def cmd_census(args) -> int:
    config = load_config(args.config) if args.config else MICRO
    if args.stages is not None:
        config = config.replace(stages=args.stages)
    if args.unshared:
        config = config.replace(share_stages=False)
    print(json.dumps(parameter_census(RDLUF(config)), indent=2))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snapspec", description="Snapshot spectral imaging reconstruction.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize a coded measurement")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", help="ground-truth cube (HSIC)")
    src.add_argument("--synthetic", type=_dims, metavar="HxWxC", help="generate a synthetic scene")
    msk = p.add_mutually_exclusive_group()
    msk.add_argument("--mask", help="coded aperture (HSIC); default is a random binary mask")
    msk.add_argument("--random-mask", action="store_true", help="draw a random mask from --seed (default)")
    p.add_argument("--mask-kind", choices=("binary", "uniform"), default="binary")
    p.add_argument("--step", type=int, default=2)
    p.add_argument("--noise-bits", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="recover a cube from a measurement")
    p.add_argument("--method", choices=("rdluf", "gaptv", "pgdtv"), required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--measurement", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True, help="output cube (HSIC)")
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--tv-weight", type=float, default=0.02)
    p.add_argument("--bands", type=int, default=28)
    p.add_argument("--step", type=int, default=2)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="PSNR / SSIM report")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--roi", type=_roi, metavar="R0,R1,C0,C1")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="write PNG figures")
    p.add_argument("--cube")
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--bands", type=int, default=4, help="number of bands in each grid")
    p.add_argument("--roi", type=_roi, metavar="R0,R1,C0,C1")
    p.add_argument("--residual-viz", action="store_true", help="plot Phi, R and Phi_hat (needs a checkpoint)")
    p.add_argument("--viz-band", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--measurement")
    p.add_argument("--mask")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("train", help="train an unfolding model on synthetic or given scenes")
    p.add_argument("--config", help="model config (YAML); defaults to the micro preset")
    p.add_argument("--stages", type=int)
    p.add_argument("--scenes", nargs="+")
    p.add_argument("--synthetic-scenes", type=int, default=4)
    p.add_argument("--scene-size", type=int, default=96)
    p.add_argument("--mask")
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--steps", type=int, default=100, help="steps per epoch")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--noise-bits", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--save-epochs", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("census", help="print per-stage parameter counts")
    p.add_argument("--config")
    p.add_argument("--stages", type=int)
    p.add_argument("--unshared", action="store_true")
    p.set_defaults(func=cmd_census)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "reconstruct" and args.method == "rdluf" and not args.checkpoint:
        parser.error("--method rdluf requires --checkpoint")
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one parseable line per failure
        msg = " ".join(str(exc).split())
        print(f"snapspec: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
