"""Residual CNN counterpart backbone with a feature-pyramid fuse back to full resolution."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BLOCK_CONVS = (3, 5, 5, 5, 5)


@dataclass(frozen=True)
class RnfConfig:
    variant: str = "S"
    widths: tuple = (16, 32, 48, 64, 64)
    convs: tuple = BLOCK_CONVS
    lateral: int = 32
    c_out: int = 64

    def validate(self, rows: int, cols: int) -> None:
        if self.variant not in ("S", "D"):
            raise ValueError(f"RNF variant must be S or D, got {self.variant!r}")
        if len(self.convs) != 5 or len(self.widths) != 5:
            raise ValueError("RNF needs exactly 5 blocks")
        if rows % 32 or cols % 32:
            raise ValueError(f"grid {rows}x{cols} not divisible by 2^5")

    def dilated(self, block: int) -> bool:
        return self.variant == "D" and block >= 2


def _units(n_convs: int) -> list[int]:
    """Convs per residual unit: a leading pair, then pairs, then a trailing single."""
    units = [2]
    rest = n_convs - 2
    units += [2] * (rest // 2) + [1] * (rest % 2)
    return units


def _conv(p, rng, name, k, cin, cout, dtype):
    p[name + ".w"] = ad.glorot(rng, (k, k, cin, cout), k * k * cin, k * k * cout, dtype)
    p[name + ".b"] = np.zeros(cout, dtype)


def init_rnf(rng, cfg: RnfConfig, c_in: int, dtype=np.float32) -> dict:
    p: dict[str, np.ndarray] = {}
    prev = c_in
    for b, (n, width) in enumerate(zip(cfg.convs, cfg.widths)):
        idx = 0
        for u, size in enumerate(_units(n)):
            for _ in range(size):
                _conv(p, rng, f"rnf.b{b}.c{idx}", 3, prev if idx == 0 else width, width, dtype)
                idx += 1
        _conv(p, rng, f"rnf.b{b}.short", 1, prev, width, dtype)
        _conv(p, rng, f"rnf.b{b}.lat", 1, width, cfg.lateral, dtype)
        prev = width
    _conv(p, rng, "rnf.fuse", 1, 5 * cfg.lateral, cfg.c_out, dtype)
    return p


def _c(x, w, name, stride=1, dilation=1, k=3):
    pad = dilation * (k - 1) // 2
    return ad.conv2d(x, w[name + ".w"], w[name + ".b"], stride=stride, padding=pad, dilation=dilation)


def residual_block(x: Tensor, w: dict, b: int, cfg: RnfConfig) -> Tensor:
    """One downsampling stage; the first conv halves the spatial dims."""
    dil = 2 if cfg.dilated(b) else 1
    stride = 1 if cfg.dilated(b) else 2
    src = ad.maxpool2x2(x) if cfg.dilated(b) else x
    idx = 0
    for u, size in enumerate(_units(cfg.convs[b])):
        y = src if u == 0 else x
        for j in range(size):
            first = u == 0 and j == 0
            y = _c(y, w, f"rnf.b{b}.c{idx}", stride=stride if first else 1, dilation=dil)
            idx += 1
            if j < size - 1:
                y = ad.relu(y)
        if u == 0:
            short = ad.conv2d(src, w[f"rnf.b{b}.short.w"], w[f"rnf.b{b}.short.b"], stride=stride)
            x = ad.relu(ad.add(short, y))
        else:
            x = ad.relu(ad.add(x, y))
    return x


def rnf_forward(x: Tensor, cfg: RnfConfig, w: dict):
    """Returns ``(features (B, H, W, C_out), block outputs)``."""
    _, H, W, _ = x.shape
    cfg.validate(H, W)
    blocks, laterals = [], []
    h = x
    for b in range(5):
        h = residual_block(h, w, b, cfg)
        blocks.append(h)
        lat = ad.conv2d(h, w[f"rnf.b{b}.lat.w"], w[f"rnf.b{b}.lat.b"])
        for _ in range(b + 1):
            lat = ad.upsample2x(lat)
        laterals.append(lat)
    fused = ad.conv2d(ad.concat(laterals, axis=-1), w["rnf.fuse.w"], w["rnf.fuse.b"])
    return fused, blocks
