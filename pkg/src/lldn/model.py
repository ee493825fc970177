"""Encoder + backbone + head assembly."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bev import (GridSpec, init_pillar_encoder, init_projector, pillar_encode, pillarize,
                  project_points, projector_cnn, slot_mask)
from .config import ModelConfig
from .gfc import GfcConfig, gfc_forward, init_gfc
from .head import (confidence_label, cross_entropy_loss, head_forward, init_head,
                   soft_dice_loss, total_loss)
from .rnf import RnfConfig, init_rnf, rnf_forward

PROJECTOR_FACTOR = 8


class LaneDetector:
    """Parameters and forward pass for one model configuration.

    ``params`` maps canonical names to leaf tensors; checkpoints store them
    sorted by name.
    """

    def __init__(self, cfg: ModelConfig, grid: GridSpec, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.grid = grid
        self.dtype = np.dtype(dtype)
        rng = ad.make_rng(seed)
        rows, cols = grid.shape
        if cfg.encoder == "projector":
            raw = init_projector(rng, 3, cfg.proj_widths, dtype)
            c_bev = cfg.proj_widths[-1]
        else:
            raw = init_pillar_encoder(rng, cfg.c_bev, dtype)
            c_bev = cfg.c_bev
        if cfg.backbone.startswith("gfc"):
            raw.update(init_gfc(rng, self.gfc_config, rows, cols, c_bev, dtype))
        else:
            self.rnf_config.validate(rows, cols)
            raw.update(init_rnf(rng, self.rnf_config, c_bev, dtype))
        raw.update(init_head(rng, cfg.c_out, dtype=dtype))
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in sorted(raw.items())}

    @property
    def gfc_config(self) -> GfcConfig:
        c = self.cfg
        return GfcConfig("T" if c.backbone == "gfc-t" else "M", c.depth, (c.patch, c.patch),
                         c.hidden, c.heads, c.mlp_ratio, c.c_out)

    @property
    def rnf_config(self) -> RnfConfig:
        c = self.cfg
        return RnfConfig("S" if c.backbone == "rnf-s" else "D", c.rnf_widths, lateral=c.rnf_lateral,
                         c_out=c.c_out)

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # -- inputs ---------------------------------------------------------------

    def encode_cloud(self, cloud) -> dict[str, np.ndarray]:
        """Fixed (non-learned) preprocessing of one cloud for the chosen encoder."""
        if self.cfg.encoder == "projector":
            img = project_points(cloud, self.grid.refine(PROJECTOR_FACTOR))
            return {"image": img.astype(self.dtype)}
        sp = pillarize(cloud, self.grid, self.cfg.n_p)
        return {"features": sp.features.astype(self.dtype),
                "mask": slot_mask(sp.counts, self.cfg.n_p)[..., None].astype(self.dtype)}

    @staticmethod
    def stack(items: Sequence[dict]) -> dict[str, np.ndarray]:
        return {k: np.stack([it[k] for it in items]) for k in items[0]}

    # -- forward --------------------------------------------------------------

    def bev_features(self, batch: dict[str, np.ndarray]) -> Tensor:
        w = self.params
        if self.cfg.encoder == "projector":
            return projector_cnn(Tensor(batch["image"]), w, stages=3)
        rows, cols = self.grid.shape
        return pillar_encode(Tensor(batch["features"]), Tensor(batch["mask"]), rows, cols, w)

    def forward(self, batch: dict[str, np.ndarray], keep_activations: bool = False) -> dict:
        x = self.bev_features(batch)
        attention, acts = [], []
        if self.cfg.backbone.startswith("gfc"):
            feats, attention, acts = gfc_forward(x, self.gfc_config, self.params, keep_activations)
        else:
            feats, blocks = rnf_forward(x, self.rnf_config, self.params)
            acts = [b.data for b in blocks] if keep_activations else []
        conf, cls, conf_logits, cls_logits = head_forward(feats, self.params)
        return {"conf": conf, "cls": cls, "conf_logits": conf_logits, "cls_logits": cls_logits,
                "attention": attention, "activations": acts, "bev": x.data}

    def loss(self, out: dict, labels: np.ndarray):
        dice = soft_dice_loss(out["conf"], confidence_label(labels))
        ce = cross_entropy_loss(out["cls_logits"], labels)
        return total_loss(dice, ce), dice, ce

    def predict(self, cloud) -> tuple[np.ndarray, np.ndarray]:
        out = self.forward(self.stack([self.encode_cloud(cloud)]))
        return out["conf"].data[0], out["cls"].data[0]
