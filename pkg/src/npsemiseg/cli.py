"""Command-line entry point: generate, train, eval, render, benchmark.

Exit codes: 0 success, 2 configuration error, 3 data/file error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import ConfigError, CoverageError, DataError, NumericError, ShapeError
from .evalkit import benchmark_uncertainty, evaluate, write_csv
from .model import DropoutSegModel, NPSegModel
from .rng import Rng
from .synthdata import generate, load_dataset, read_ppm, save_dataset, write_pgm, write_ppm
from .trainer import MCDropoutPredictor, fit, load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# background black, then fixed distinct colours; cycles past 12 classes
RENDER_PALETTE = np.array([
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128),
], dtype=np.uint8)


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def cmd_generate(config_path, out_dir) -> Path:
    cfg = _config(config_path)
    return save_dataset(generate(**cfg.generate_kwargs()), out_dir)


def cmd_train(config_path, data_dir, out_dir, resume=None):
    cfg = _config(config_path)
    tcfg = cfg.train_config()
    dataset = load_dataset(data_dir)
    model, start_epoch = None, 0
    if resume:
        model, old_cfg, steps = load_checkpoint(resume)
        if old_cfg.head != tcfg.head or old_cfg.model_config() != tcfg.model_config():
            raise ConfigError("resume checkpoint was trained with a different architecture")
        per_epoch = math.ceil(len(dataset.split("labeled")) / tcfg.batch_labeled)
        start_epoch = steps // per_epoch
    return fit(tcfg, dataset, out_dir, model=model, start_epoch=start_epoch)


def _predictor(model, T):
    return MCDropoutPredictor(model, T) if isinstance(model, DropoutSegModel) else model


def cmd_eval(checkpoint, data_dir, out_csv, mode="crop", crop=None, stride=None, split="val",
             config_path=None, run_id=None):
    cfg = _config(config_path)
    model, tcfg, _ = load_checkpoint(checkpoint)
    samples = load_dataset(data_dir).split(split)
    if not samples:
        raise DataError(f"split {split!r} is empty in {data_dir}")
    res = evaluate(_predictor(model, tcfg.n_samples), samples, mode, crop, stride, tcfg.n_samples,
                   seed=tcfg.seed, pavpu_cfg=cfg.pavpu_config())
    is_mc = isinstance(model, DropoutSegModel)
    row = {"run_id": run_id or Path(checkpoint).stem, "split": split, "miou": res.miou,
           "pavpu": res.pavpu, "wall_ms_np": "" if is_mc else res.wall_ms,
           "wall_ms_mc": res.wall_ms if is_mc else "", "T": tcfg.n_samples}
    write_csv(out_csv, "metrics", [row])
    return row


def uncertainty_levels(uncertainty: np.ndarray, n_class: int) -> np.ndarray:
    """Grey levels ``round(255 * H / ln C)``: black is certain, white maximally uncertain."""
    scaled = np.round(255.0 * np.asarray(uncertainty, np.float64) / math.log(n_class))
    return np.clip(scaled, 0, 255).astype(np.uint8)


def cmd_render(checkpoint, image_path, out_prefix):
    model, tcfg, _ = load_checkpoint(checkpoint)
    image = read_ppm(image_path)
    bundle = _predictor(model, tcfg.n_samples).predict(image, Rng(tcfg.seed).child("render"),
                                                       tcfg.n_samples)
    colours = RENDER_PALETTE[bundle.labels % len(RENDER_PALETTE)].transpose(2, 0, 1) / 255.0
    pred_path, unc_path = Path(f"{out_prefix}_pred.ppm"), Path(f"{out_prefix}_uncertainty.pgm")
    write_ppm(pred_path, colours)
    write_pgm(unc_path, uncertainty_levels(bundle.uncertainty, tcfg.n_class))
    return pred_path, unc_path


def cmd_benchmark(checkpoint, T_list, repeats, out_csv, data_dir=None, n_images=4,
                  crop=None, stride=None):
    """Time NP vs MC-dropout uncertainty; the MC model reuses the checkpoint's encoder."""
    model, tcfg, _ = load_checkpoint(checkpoint)
    if not isinstance(model, NPSegModel):
        raise ConfigError("benchmark needs an NP checkpoint")
    if data_dir:
        images = [s.image for s in load_dataset(data_dir).split("val")[:n_images]]
    else:
        images = [s.image for s in generate(seed=tcfg.seed, n_labeled=0, n_unlabeled=0,
                                            n_val=n_images).samples]
    if not images:
        raise DataError("no images to benchmark on")
    mc = DropoutSegModel(model.cfg.encoder, tcfg.decoder_hidden, tcfg.n_class, tcfg.dropout,
                         tcfg.seed, encoder=model.encoder)
    rows = []
    for T in T_list:
        r = benchmark_uncertainty(model, mc, images, T, repeats, crop, stride)
        rows.append({"T": T, "repeats": r.repeats, "windows": r.windows, "passes_np": r.passes_np,
                     "passes_mc": r.passes_mc, "wall_ms_np": r.wall_ms_np,
                     "wall_ms_mc": r.wall_ms_mc, "ratio": r.ratio, "warning": r.warning})
    write_csv(out_csv, "benchmark", rows)
    return rows


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="npsemiseg", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write the synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="self-train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="mIoU and PAvPU on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--mode", choices=("crop", "slide"))
    e.add_argument("--crop", type=int)
    e.add_argument("--stride", type=int)
    e.add_argument("--split", default="val")
    e.add_argument("--config")
    e.add_argument("--run-id")

    r = sub.add_parser("render", help="prediction PPM and uncertainty PGM for one image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True, help="output prefix")

    b = sub.add_parser("benchmark", help="NP vs MC-dropout uncertainty timing")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--T", default=None, help="comma-separated sample counts")
    b.add_argument("--repeats", type=int)
    b.add_argument("--out", required=True)
    b.add_argument("--data")
    b.add_argument("--crop", type=int)
    b.add_argument("--stride", type=int)
    b.add_argument("--config")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "generate":
        cmd_generate(args.config, args.out)
    elif args.command == "train":
        cmd_train(args.config, args.data, args.out, args.resume)
    elif args.command == "eval":
        cfg = _config(args.config)
        cmd_eval(args.checkpoint, args.data, args.out, args.mode or cfg.eval_mode,
                 args.crop if args.crop is not None else cfg.crop,
                 args.stride if args.stride is not None else cfg.stride,
                 args.split, args.config, args.run_id)
    elif args.command == "render":
        cmd_render(args.checkpoint, args.image, args.out)
    elif args.command == "benchmark":
        cfg = _config(args.config)
        try:
            T_list = [int(t) for t in args.T.split(",")] if args.T else list(cfg.bench_T)
        except ValueError:
            raise ConfigError(f"--T must be comma-separated integers, got {args.T!r}") from None
        repeats = args.repeats if args.repeats is not None else cfg.bench_repeats
        if repeats < 1 or min(T_list) < 1:
            raise ConfigError("T values and repeats must be >= 1")
        rows = cmd_benchmark(args.checkpoint, T_list, repeats, args.out, args.data,
                             cfg.bench_images, args.crop, args.stride)
        if any(row["warning"] for row in rows):
            print("warning: a single repeat gives no timing spread", file=sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ConfigError, ShapeError, CoverageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
