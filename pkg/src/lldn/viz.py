"""Image output: PGM/PPM heatmaps and attention overlays, plus matplotlib report figures."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np


class VizError(ValueError):
    pass


def write_pgm(path, img) -> None:
    """Binary 8-bit graymap from values in [0, 1]."""
    a = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    if a.ndim != 2:
        raise VizError(f"graymap needs a 2-D array, got {a.shape}")
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]) + a.tobytes())


def write_ppm(path, img) -> None:
    a = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    if a.ndim != 3 or a.shape[2] != 3:
        raise VizError(f"pixmap needs an H x W x 3 array, got {a.shape}")
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (a.shape[1], a.shape[0]) + a.tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    ch = 3 if magic == b"P6" else 1
    a = np.frombuffer(body, dtype=np.uint8).reshape(h, w, ch)
    return a[..., 0] if ch == 1 else a


def minmax(channel) -> np.ndarray:
    """Min-max normalize; a constant channel maps to all zeros."""
    c = np.asarray(channel, dtype=np.float64)
    lo, hi = c.min(), c.max()
    if hi - lo <= 0:
        return np.zeros_like(c)
    return (c - lo) / (hi - lo)


def heatmaps(activation, channels: Sequence[int]) -> list[np.ndarray]:
    """Per-channel normalized images from one ``H x W x C`` block activation."""
    act = np.asarray(activation)
    out = []
    for ch in channels:
        if not 0 <= ch < act.shape[-1]:
            raise VizError(f"channel {ch} out of range 0..{act.shape[-1] - 1}")
        out.append(minmax(act[..., ch]))
    return out


def attention_overlay(scores, query: int, grid_shape, patch: int, intensity) -> np.ndarray:
    """RGB overlay of one attention row on the BEV intensity raster.

    ``scores`` is a single head's ``N x N`` row-stochastic matrix. The query
    row is reshaped to the patch grid and upsampled to the label grid; it is
    encoded in the red and blue channels (purple), intensity in green.
    """
    scores = np.asarray(scores)
    if not 0 <= query < scores.shape[0]:
        raise VizError(f"query patch {query} out of range 0..{scores.shape[0] - 1}")
    row = scores[query]
    if abs(row.sum() - 1.0) > 1e-6 or row.min() < 0:
        raise VizError("attention row is not a probability distribution")
    rows, cols = grid_shape
    tile = row.reshape(rows // patch, cols // patch)
    up = np.kron(tile, np.ones((patch, patch)))
    a = minmax(up)
    inten = minmax(intensity)
    img = np.stack([a, np.maximum(inten, 0.0) * 0.8, a], axis=-1)
    # outline the query patch in yellow
    qr, qc = divmod(query, cols // patch)
    r0, c0 = qr * patch, qc * patch
    img[r0, c0:c0 + patch] = img[r0 + patch - 1, c0:c0 + patch] = (1, 1, 0)
    img[r0:r0 + patch, c0] = img[r0:r0 + patch, c0 + patch - 1] = (1, 1, 0)
    return img


def prediction_image(conf, label, sigma_conf: float = 0.5) -> np.ndarray:
    """Green = label, red = thresholded prediction, yellow where both."""
    pred = (np.asarray(conf) > sigma_conf).astype(np.float64)
    lab = (np.asarray(label) > 0).astype(np.float64)
    return np.stack([pred, lab, np.zeros_like(pred)], axis=-1)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_report(report, path) -> None:
    """Bar chart of per-slice F1 next to the CSV report."""
    plt = _pyplot()
    names = [n for n, s in report.slices.items() if s.frames > 0]
    conf = [report.slices[n].conf.f1 for n in names]
    cls = [report.slices[n].cls.f1 if report.slices[n].cls is not None else np.nan for n in names]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(8, 3.2))
    ax.bar(x - 0.2, conf, 0.4, label="confidence")
    if not np.all(np.isnan(cls)):
        ax.bar(x + 0.2, cls, 0.4, label="classification")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("F1")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_training(rows, path) -> None:
    plt = _pyplot()
    epochs = [r[0] for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    a1.plot(epochs, [r[1] for r in rows])
    a1.set_xlabel("epoch")
    a1.set_ylabel("loss")
    a2.plot(epochs, [r[2] for r in rows], label="F1 conf")
    a2.plot(epochs, [r[3] for r in rows], label="F1 cls")
    a2.set_xlabel("epoch")
    a2.set_ylim(0, 1)
    a2.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
