"""Mini-batch training loop with per-epoch held-out evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .metrics import evaluate_dataset
from .model import LaneDetector

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,loss,f1_conf,f1_cls,seconds"


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainResult:
    model: LaneDetector
    state: ad.AdamState
    rows: list = field(default_factory=list)  # (epoch, loss, f1_conf, f1_cls, seconds)
    best_f1: float = -1.0
    best_epoch: int = 0
    best_params: Optional[dict] = None
    rng: Optional[np.random.Generator] = None  # shuffle stream, saved with checkpoints

    def log_csv(self, with_time: bool = True) -> str:
        lines = [LOG_HEADER]
        for e, loss, f1c, f1k, sec in self.rows:
            lines.append(f"{e},{loss:.8f},{f1c:.6f},{f1k:.6f},{sec:.3f}" if with_time
                         else f"{e},{loss:.8f},{f1c:.6f},{f1k:.6f},-")
        return "\n".join(lines) + "\n"


def batched_predict(model: LaneDetector, frames: Sequence, batch: int = 16):
    """``{id(frame): (conf, cls)}`` computed in batches, no tape."""
    out = {}
    for i in range(0, len(frames), batch):
        chunk = frames[i:i + batch]
        res = model.forward(model.stack([model.encode_cloud(f.cloud) for f in chunk]))
        for k, f in enumerate(chunk):
            out[id(f)] = (res["conf"].data[k], res["cls"].data[k])
    return out


def evaluate_model(model: LaneDetector, frames: Sequence, sigma_conf: float = 0.5, threads: int = 1):
    preds = batched_predict(model, frames)
    return evaluate_dataset(frames, lambda f: preds[id(f)], sigma_conf, threads)


def train(cfg: RunConfig, train_frames: Sequence, val_frames: Sequence,
          on_epoch: Optional[Callable] = None, model: Optional[LaneDetector] = None) -> TrainResult:
    t = cfg.train
    grid = cfg.grid.spec()
    model = model or LaneDetector(cfg.model, grid, seed=t.seed)
    state = ad.AdamState(lr=t.lr)
    if t.max_train_frames:
        train_frames = list(train_frames)[:t.max_train_frames]
    inputs = [model.encode_cloud(f.cloud) for f in train_frames]
    labels = [f.label.astype(np.int64) for f in train_frames]
    rng = ad.make_rng(t.seed ^ 0x5EED)
    result = TrainResult(model, state, rng=rng)
    params = model.params

    for epoch in range(1, t.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(inputs))
        losses = []
        for s in range(0, len(order), t.batch):
            idx = order[s:s + t.batch]
            batch = model.stack([inputs[i] for i in idx])
            with ad.Tape() as tape:
                out = model.forward(batch)
                loss, _, _ = model.loss(out, np.stack([labels[i] for i in idx]))
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss at epoch {epoch}")
                ad.backward(loss, tape)
            ad.adam_step(params, state)
            if not all(np.isfinite(p.data).all() for p in params.values()):
                raise NumericError(f"non-finite parameters after step {state.t} (epoch {epoch})")
            losses.append(value)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        if val_frames:
            rep = evaluate_model(model, val_frames, cfg.eval.sigma_conf)
            f1c, f1k = rep.total.conf.f1, rep.total.cls.f1
        else:
            f1c = f1k = float("nan")
        seconds = time.perf_counter() - t0
        result.rows.append((epoch, mean_loss, f1c, f1k, seconds))
        log.info("epoch %d loss %.5f f1_conf %.4f f1_cls %.4f (%.1fs)", epoch, mean_loss, f1c, f1k, seconds)
        if f1c > result.best_f1:
            result.best_f1, result.best_epoch = f1c, epoch
            result.best_params = {k: p.data.copy() for k, p in params.items()}
        if on_epoch:
            on_epoch(result)
        if t.target_f1 and f1c >= t.target_f1:
            break
    return result
