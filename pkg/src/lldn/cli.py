"""Command line: generate, train, eval, infer, viz."""
from __future__ import annotations

import argparse
import collections
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .heuristic import heuristic_detect
from .metrics import CSV_HEADER, evaluate_dataset
from .model import LaneDetector
from .synth import (TAGS, FrameFormatError, frame_seed, generate_frame, read_frame, read_manifest,
                    scheduled_config, write_frame, write_manifest)
from .train import NumericError, evaluate_model, train
from .viz import (VizError, attention_overlay, heatmaps, plot_report, plot_training,
                  prediction_image, write_pgm, write_ppm)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.txt"

log = logging.getLogger("lldn")


class DataError(RuntimeError):
    pass


def _limit_threads(n: int):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(int(n), 1))


# -- generate -------------------------------------------------------------------

def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    hist = collections.Counter()
    for i in range(args.frames):
        fs = frame_seed(args.seed, i)
        frame = generate_frame(scheduled_config(i, args.seed, args.profile, args.points), fs)
        name = f"frame_{i:05d}.klnf"
        write_frame(frame, out / name)
        entries.append((name, "train" if fs % 2 == 0 else "test"))
        hist.update(frame.tags)
    write_manifest(entries, out / MANIFEST)
    print(f"wrote {args.frames} frames to {out}")
    for tag in TAGS:
        print(f"  {tag:14s} {hist[tag]}")
    return EXIT_OK


def load_split(data_dir, split: str):
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST
    if not manifest.exists():
        raise DataError(f"no manifest in {data_dir}")
    try:
        return [read_frame(data_dir / p) for p, s in read_manifest(manifest) if s == split]
    except (OSError, FrameFormatError) as exc:
        raise DataError(str(exc)) from exc


# -- checkpoints ----------------------------------------------------------------

def rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {"counter": [int(x) for x in st["state"]["counter"]],
            "key": [int(x) for x in st["state"]["key"]],
            "buffer_pos": int(st["buffer_pos"])}


def model_checkpoint(cfg: RunConfig, params: dict, epoch: int, state=None, extra=None,
                     rng=None) -> Checkpoint:
    adam = None
    if state is not None:
        adam = {"t": state.t, "m": dict(state.m), "v": dict(state.v)}
    return Checkpoint(cfg.to_text(), {k: np.asarray(v, dtype=np.float32) for k, v in params.items()},
                      epoch, rng_state(rng or ad.make_rng(cfg.train.seed)), adam, extra or {})


def model_from_checkpoint(ckpt: Checkpoint):
    cfg = parse_config(ckpt.config_text)
    model = LaneDetector(cfg.model, cfg.grid.spec(), seed=cfg.train.seed)
    missing = sorted(set(model.params) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(model.params))
    if missing or extra:
        raise ConfigError(f"checkpoint tensors do not match config: missing {missing[:3]}, extra {extra[:3]}")
    for k, p in model.params.items():
        if ckpt.tensors[k].shape != p.shape:
            raise ConfigError(f"tensor {k} has shape {ckpt.tensors[k].shape}, config expects {p.shape}")
        p.data = ckpt.tensors[k].astype(model.dtype)
    return cfg, model


# -- train ----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    print(cfg.to_text())
    train_frames = load_split(args.data, "train")
    test_frames = load_split(args.data, "test")
    if not train_frames:
        raise DataError("train split is empty")
    if {f.grid for f in train_frames + test_frames} != {cfg.grid.spec()}:
        raise ConfigError("dataset grid does not match the configured grid")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    val = test_frames[:cfg.train.val_frames]
    with _limit_threads(args.threads):
        result = train(cfg, train_frames, val)
    last = model_checkpoint(cfg, {k: p.data for k, p in result.model.params.items()},
                            len(result.rows), result.state, rng=result.rng)
    save_checkpoint(last, out / "last.ckpt")
    best_params = result.best_params or {k: p.data for k, p in result.model.params.items()}
    save_checkpoint(model_checkpoint(cfg, best_params, result.best_epoch,
                                     extra={"best_f1_conf": round(result.best_f1, 6)}),
                    out / "best.ckpt")
    (out / "train_log.csv").write_text(result.log_csv(with_time=not args.no_timing))
    if result.rows:
        plot_training(result.rows, out / "training.png")
    print(f"best held-out F1_conf {result.best_f1:.4f} at epoch {result.best_epoch}; wrote {out}")
    return EXIT_OK


# -- eval -----------------------------------------------------------------------

def cmd_eval(args) -> int:
    frames = load_split(args.data, args.split)
    if not frames:
        raise DataError(f"{args.split} split is empty")
    with _limit_threads(args.threads):
        if args.heuristic:
            name = "heuristic"
            report = evaluate_dataset(frames, lambda f: (heuristic_detect(f.cloud, f.grid), None),
                                      args.sigma_conf, args.threads)
        elif args.oracle:
            name = "oracle"
            report = evaluate_dataset(frames, _oracle, args.sigma_conf, args.threads)
        else:
            cfg, model = model_from_checkpoint(load_checkpoint(args.checkpoint))
            if {f.grid for f in frames} != {model.grid}:
                raise ConfigError("dataset grid does not match the checkpoint grid")
            name = Path(args.checkpoint).stem
            report = evaluate_model(model, frames, args.sigma_conf, args.threads)
    out = Path(args.out) if args.out else Path(args.data) / f"report_{name}.csv"
    out.write_text(report.to_csv())
    plot_report(report, out.with_suffix(".png"))
    total = [l for l in report.to_csv().splitlines() if l.startswith("total,")][0]
    print(CSV_HEADER)
    print(total)
    print(f"fps {report.fps:.1f} over {report.total.frames} frames; report {out}")
    return EXIT_OK


def _oracle(frame):
    onehot = np.eye(7)[frame.label]
    return (frame.label > 0).astype(np.float64), onehot


# -- infer / viz ----------------------------------------------------------------

def cmd_infer(args) -> int:
    _, model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    frame = _read_frame(args.frame)
    conf, cls = model.predict(frame.cloud)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "confidence.pgm", conf)
    write_pgm(out / "classes.pgm", cls.argmax(-1) / 6.0)
    write_ppm(out / "prediction.ppm", prediction_image(conf, frame.label, args.sigma_conf))
    print(f"positive grids {(conf > args.sigma_conf).sum()}; wrote {out}")
    return EXIT_OK


def _read_frame(path):
    try:
        return read_frame(path)
    except (OSError, FrameFormatError) as exc:
        raise DataError(str(exc)) from exc


def cmd_viz(args) -> int:
    cfg, model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    frame = _read_frame(args.frame)
    res = model.forward(model.stack([model.encode_cloud(frame.cloud)]), keep_activations=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_blocks = len(res["activations"])
    if not 1 <= args.block <= n_blocks:
        raise VizError(f"block {args.block} out of range 1..{n_blocks}")
    if args.kind == "heatmap":
        channels = [int(c) for c in args.channels.split(",")]
        for ch, img in zip(channels, heatmaps(res["activations"][args.block - 1][0], channels)):
            write_pgm(out / f"heatmap_b{args.block}_c{ch}.pgm", img)
    else:
        if cfg.model.backbone != "gfc-t":
            raise VizError(f"attention maps need a gfc-t checkpoint, got {cfg.model.backbone}")
        scores = res["attention"][args.block - 1][0]
        if not 0 <= args.head < scores.shape[0]:
            raise VizError(f"head {args.head} out of range 0..{scores.shape[0] - 1}")
        from .bev import project_points
        inten = project_points(frame.cloud, frame.grid)[..., 1]
        img = attention_overlay(scores[args.head], args.query, frame.grid.shape, cfg.model.patch, inten)
        write_ppm(out / f"attention_b{args.block}_h{args.head}_q{args.query}.ppm", img)
    print(f"wrote {args.kind} images to {out}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lldn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset and manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--profile", default="default")
    g.add_argument("--points", type=int, default=8192)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on the train split")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", default="run")
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--no-timing", action="store_true",
                   help="write '-' in the seconds column so logs compare byte for byte")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or the heuristic on the test split")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--heuristic", action="store_true")
    src.add_argument("--oracle", action="store_true", help=argparse.SUPPRESS)
    e.add_argument("--data", required=True)
    e.add_argument("--sigma-conf", type=float, default=0.5)
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="run a checkpoint on one frame")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--frame", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--sigma-conf", type=float, default=0.5)
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("viz", help="block heatmaps or attention maps")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--frame", required=True)
    v.add_argument("--kind", choices=("heatmap", "attention"), required=True)
    v.add_argument("--block", type=int, default=1)
    v.add_argument("--head", type=int, default=0)
    v.add_argument("--query", type=int, default=0)
    v.add_argument("--channels", default="0,1")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "sigma_conf", 0.5) is not None and not 0 < getattr(args, "sigma_conf", 0.5) < 1:
        print("error: --sigma-conf must lie in (0, 1)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, VizError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FrameFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
