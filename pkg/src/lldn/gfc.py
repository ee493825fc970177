"""Global feature correlator backbones: patch embedding, Transformer or Mixer
blocks, and the un-patching reshape followed by a 1x1 fuse."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class GfcConfig:
    variant: str = "T"
    depth: int = 3
    patch: tuple = (8, 8)
    hidden: int = 512
    heads: int = 4
    mlp_ratio: int = 2
    c_out: int = 64

    def validate(self, rows: int, cols: int) -> None:
        hp, wp = self.patch
        if self.variant not in ("T", "M"):
            raise ValueError(f"GFC variant must be T or M, got {self.variant!r}")
        if rows % hp or cols % wp:
            raise ValueError(f"grid {rows}x{cols} not divisible by patch {hp}x{wp}")
        if self.hidden % (hp * wp):
            raise ValueError(f"hidden dim {self.hidden} not divisible by patch area {hp * wp}")
        if self.variant == "T" and self.hidden % self.heads:
            raise ValueError(f"hidden dim {self.hidden} not divisible by {self.heads} heads")

    def n_patch(self, rows: int, cols: int) -> int:
        return (rows // self.patch[0]) * (cols // self.patch[1])

    @property
    def pixel_channels(self) -> int:
        return self.hidden // (self.patch[0] * self.patch[1])


def _ln(params, prefix, n, dtype):
    params[prefix + ".g"] = np.ones(n, dtype)
    params[prefix + ".b"] = np.zeros(n, dtype)


def _lin(params, rng, prefix, n_in, n_out, dtype):
    params[prefix + ".w"] = ad.glorot(rng, (n_in, n_out), n_in, n_out, dtype)
    params[prefix + ".b"] = np.zeros(n_out, dtype)


def init_gfc(rng, cfg: GfcConfig, rows: int, cols: int, c_in: int, dtype=np.float32) -> dict:
    cfg.validate(rows, cols)
    hp, wp = cfg.patch
    nh, n = cfg.hidden, cfg.n_patch(rows, cols)
    p: dict[str, np.ndarray] = {}
    _lin(p, rng, "gfc.embed", hp * wp * c_in, nh, dtype)
    p["gfc.pos"] = (0.02 * rng.standard_normal((n, nh))).astype(dtype)
    for i in range(cfg.depth):
        b = f"gfc.block{i}"
        _ln(p, b + ".ln1", nh, dtype)
        _ln(p, b + ".ln2", nh, dtype)
        if cfg.variant == "T":
            _lin(p, rng, b + ".qkv", nh, 3 * nh, dtype)
            _lin(p, rng, b + ".proj", nh, nh, dtype)
        else:
            _lin(p, rng, b + ".tok1", n, cfg.mlp_ratio * n, dtype)
            _lin(p, rng, b + ".tok2", cfg.mlp_ratio * n, n, dtype)
        _lin(p, rng, b + ".ff1", nh, cfg.mlp_ratio * nh, dtype)
        _lin(p, rng, b + ".ff2", cfg.mlp_ratio * nh, nh, dtype)
    _lin(p, rng, "gfc.fuse", cfg.pixel_channels, cfg.c_out, dtype)
    return p


def patchify(x: Tensor, patch) -> Tensor:
    """``(B, H, W, C)`` to ``(B, N_patch, H_p*W_p*C)``, patches and pixels row-major."""
    B, H, W, C = x.shape
    hp, wp = patch
    if H % hp or W % wp:
        raise ad.ShapeError("patchify", f"{H}x{W} not divisible by patch {hp}x{wp}")
    t = ad.reshape(x, (B, H // hp, hp, W // wp, wp, C))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    return ad.reshape(t, (B, (H // hp) * (W // wp), hp * wp * C))


def unpatchify(tokens: Tensor, patch, rows: int, cols: int) -> Tensor:
    """Inverse of :func:`patchify`: each token becomes an ``H_p x W_p`` tile."""
    B, n, d = tokens.shape
    hp, wp = patch
    if d % (hp * wp):
        raise ad.ShapeError("unpatchify", f"token dim {d} not divisible by patch area {hp * wp}")
    if n != (rows // hp) * (cols // wp):
        raise ad.ShapeError("unpatchify", f"{n} tokens do not tile a {rows}x{cols} grid")
    c = d // (hp * wp)
    t = ad.reshape(tokens, (B, rows // hp, cols // wp, hp, wp, c))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    return ad.reshape(t, (B, rows, cols, c))


def patch_embed(x: Tensor, cfg: GfcConfig, w: dict) -> Tensor:
    cfg.validate(x.shape[1], x.shape[2])
    tokens = ad.linear(patchify(x, cfg.patch), w["gfc.embed.w"], w["gfc.embed.b"])
    return ad.add(tokens, w["gfc.pos"])


def transformer_block(t: Tensor, w: dict, prefix: str, heads: int):
    """Pre-norm encoder block. Returns the new tokens and attention ``(B, heads, N, N)``."""
    B, n, d = t.shape
    if d % heads:
        raise ad.ShapeError("transformer_block", f"token dim {d} not divisible by {heads} heads")
    dh = d // heads
    h = ad.layer_norm(t, w[prefix + ".ln1.g"], w[prefix + ".ln1.b"])
    qkv = ad.linear(h, w[prefix + ".qkv.w"], w[prefix + ".qkv.b"])
    qkv = ad.transpose(ad.reshape(qkv, (B, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = (ad.select(qkv, i) for i in range(3))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, n, d))
    t = ad.add(t, ad.linear(ctx, w[prefix + ".proj.w"], w[prefix + ".proj.b"]))
    t = _ffn(t, w, prefix)
    return t, attn


def _ffn(t: Tensor, w: dict, prefix: str) -> Tensor:
    h = ad.layer_norm(t, w[prefix + ".ln2.g"], w[prefix + ".ln2.b"])
    h = ad.gelu(ad.linear(h, w[prefix + ".ff1.w"], w[prefix + ".ff1.b"]))
    return ad.add(t, ad.linear(h, w[prefix + ".ff2.w"], w[prefix + ".ff2.b"]))


def mixer_block(t: Tensor, w: dict, prefix: str) -> Tensor:
    """Token-mixing MLP across patches, then channel-mixing MLP, each pre-norm residual."""
    B, n, d = t.shape
    if w[prefix + ".tok1.w"].shape[0] != n:
        raise ad.ShapeError("mixer_block", f"{n} tokens vs token-mixing width {w[prefix + '.tok1.w'].shape[0]}")
    h = ad.layer_norm(t, w[prefix + ".ln1.g"], w[prefix + ".ln1.b"])
    h = ad.transpose(h, (0, 2, 1))
    h = ad.gelu(ad.linear(h, w[prefix + ".tok1.w"], w[prefix + ".tok1.b"]))
    h = ad.linear(h, w[prefix + ".tok2.w"], w[prefix + ".tok2.b"])
    t = ad.add(t, ad.transpose(h, (0, 2, 1)))
    return _ffn(t, w, prefix)


def unpatchify_fuse(tokens: Tensor, cfg: GfcConfig, rows: int, cols: int, w: dict) -> Tensor:
    img = unpatchify(tokens, cfg.patch, rows, cols)
    return ad.linear(img, w["gfc.fuse.w"], w["gfc.fuse.b"])


def gfc_forward(x: Tensor, cfg: GfcConfig, w: dict, keep_activations: bool = False):
    """Returns ``(features, attention, activations)``.

    ``attention`` holds one ``(B, heads, N, N)`` array per Transformer block
    (empty for Mixer); ``activations`` holds each block's un-patched output
    when ``keep_activations`` is set.
    """
    _, rows, cols, _ = x.shape
    t = patch_embed(x, cfg, w)
    attention, acts = [], []
    for i in range(cfg.depth):
        prefix = f"gfc.block{i}"
        if cfg.variant == "T":
            t, a = transformer_block(t, w, prefix, cfg.heads)
            attention.append(a.data)
        else:
            t = mixer_block(t, w, prefix)
        if keep_activations:
            acts.append(unpatchify(t, cfg.patch, rows, cols).data)
    return unpatchify_fuse(t, cfg, rows, cols, w), attention, acts
