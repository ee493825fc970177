import math

import numpy as np
import pytest

from lldn import autodiff as ad
from lldn.autodiff import Tensor
from lldn.bev import GridSpec
from lldn.config import ModelConfig
from lldn.gfc import GfcConfig, init_gfc, patchify, transformer_block, unpatchify
from lldn.head import (confidence_label, cross_entropy_loss, head_forward, init_head,
                       soft_dice_loss, total_loss)
from lldn.model import LaneDetector
from lldn.rnf import RnfConfig, _units, init_rnf, rnf_forward


def test_patchify_inverse():
    x = np.random.default_rng(0).standard_normal((2, 8, 12, 3))
    t = patchify(Tensor(x), (4, 2))
    assert t.shape == (2, 12, 24)
    back = unpatchify(t, (4, 2), 8, 12).data
    np.testing.assert_array_equal(back.reshape(-1), x.reshape(-1))


def test_patch_token_holds_its_tile():
    x = np.arange(4 * 4).reshape(1, 4, 4, 1).astype(float)
    t = patchify(Tensor(x), (2, 2)).data
    np.testing.assert_array_equal(sorted(t[0, 1]), [2, 3, 6, 7])


def test_gfc_config_validation():
    with pytest.raises(ValueError):
        GfcConfig("T", patch=(3, 3), hidden=18).validate(16, 16)
    with pytest.raises(ValueError):
        GfcConfig("T", patch=(4, 4), hidden=40).validate(16, 16)
    with pytest.raises(ValueError):
        GfcConfig("T", patch=(4, 4), hidden=48, heads=5).validate(16, 16)
    assert GfcConfig("M", patch=(8, 8), hidden=512).pixel_channels == 8


def test_attention_shape_and_rows():
    cfg = GfcConfig("T", depth=1, patch=(2, 2), hidden=16, heads=4, c_out=4)
    w = {k: Tensor(v) for k, v in init_gfc(ad.make_rng(1), cfg, 8, 8, 3).items()}
    t = Tensor(np.random.default_rng(1).standard_normal((2, 16, 16)))
    out, attn = transformer_block(t, w, "gfc.block0", 4)
    assert out.shape == (2, 16, 16) and attn.shape == (2, 4, 16, 16)
    np.testing.assert_allclose(attn.data.sum(-1), 1.0, atol=1e-6)


def test_rnf_units():
    assert _units(3) == [2, 1]
    assert _units(5) == [2, 2, 1]
    assert _units(2) == [2]


@pytest.mark.parametrize("variant", ["S", "D"])
def test_rnf_shapes(variant):
    cfg = RnfConfig(variant, widths=(4, 4, 6, 6, 8), lateral=4, c_out=5)
    w = {k: Tensor(v) for k, v in init_rnf(ad.make_rng(2), cfg, 3).items()}
    fused, blocks = rnf_forward(Tensor(np.random.default_rng(2).random((1, 32, 64, 3))), cfg, w)
    assert fused.shape == (1, 32, 64, 5)
    assert [b.shape[1:3] for b in blocks] == [(16, 32), (8, 16), (4, 8), (2, 4), (1, 2)]
    with pytest.raises(ValueError):
        cfg.validate(48, 64)


def test_head_outputs_are_probabilities():
    w = {k: Tensor(v) for k, v in init_head(ad.make_rng(3), c_out=6).items()}
    conf, cls, _, _ = head_forward(Tensor(np.random.default_rng(3).standard_normal((2, 4, 5, 6))), w)
    assert conf.shape == (2, 4, 5) and cls.shape == (2, 4, 5, 7)
    assert np.all((conf.data > 0) & (conf.data < 1))
    np.testing.assert_allclose(cls.data.sum(-1), 1.0, atol=1e-6)
    with pytest.raises(ad.ShapeError):
        head_forward(Tensor(np.zeros((1, 2, 2, 5))), w)


def test_dice_known_value():
    pred = np.array([[0.5, 0.5], [0.0, 1.0]])
    lab = np.array([[1.0, 0.0], [0.0, 1.0]])
    # 1 - 2 * 1.5 / (1.5 + 2 + eps)
    assert math.isclose(float(soft_dice_loss(Tensor(pred), lab).data), 1 - 3 / (3.5 + 1e-12), rel_tol=1e-14)


def test_cross_entropy_known_value():
    logits = np.log(np.array([[[[0.5, 0.25, 0.25, 0, 0, 0, 0]]]]) + 1e-300)
    ce = float(cross_entropy_loss(Tensor(logits), np.array([[[1]]])).data)
    assert math.isclose(ce, math.log(4), rel_tol=1e-12)
    with pytest.raises(ValueError):
        cross_entropy_loss(Tensor(np.zeros((1, 1, 1, 7))), np.array([[[7]]]))


def test_total_loss_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        total_loss(Tensor(float("nan")), Tensor(1.0))


def test_confidence_label():
    np.testing.assert_array_equal(confidence_label(np.array([[0, 3], [6, 0]])), [[0, 1], [1, 0]])


@pytest.mark.parametrize("encoder,backbone", [("pillars", "gfc-m"), ("pillars", "gfc-t"),
                                              ("projector", "gfc-m"), ("projector", "rnf-s")])
def test_detector_forward_shapes(encoder, backbone, frame):
    cfg = ModelConfig(encoder, backbone, depth=1, patch=4, hidden=32, heads=2, c_bev=8, c_out=8,
                      n_p=4, proj_widths=(4, 4, 8), rnf_widths=(4, 4, 4, 4, 4), rnf_lateral=4)
    model = LaneDetector(cfg, GridSpec(), seed=0)
    out = model.forward(model.stack([model.encode_cloud(frame.cloud)] * 2), keep_activations=True)
    assert out["conf"].shape == (2, 32, 32) and out["cls"].shape == (2, 32, 32, 7)
    assert out["bev"].shape[:3] == (2, 32, 32)
    assert len(out["attention"]) == (1 if backbone == "gfc-t" else 0)
    assert out["activations"]
    total, dice, ce = model.loss(out, np.stack([frame.label] * 2))
    assert math.isclose(float(total.data), float(dice.data) + float(ce.data), rel_tol=1e-6)


def test_detector_init_is_seeded(grid):
    a = LaneDetector(ModelConfig(), grid, seed=4)
    b = LaneDetector(ModelConfig(), grid, seed=4)
    assert list(a.params) == sorted(a.params)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert a.params["gfc.fuse.b"].data.sum() == 0
