import numpy as np
import pytest

from lldn import autodiff as ad
from lldn.autodiff import Tensor
from lldn.bev import (N_C, GridSpec, init_pillar_encoder, pillar_encode, pillarize,
                      project_points, slot_mask)


def cloud_of(*rows):
    return np.array(rows, dtype=np.float64).reshape(-1, 5)


def test_cell_of_floors_and_inside():
    g = GridSpec()
    r, c = g.cell_of(np.array([0.0, 0.95, 0.97, -0.1]), np.array([-7.68, -7.1, 0.0, 7.0]))
    assert c.tolist() == [0, 0, 1, -1]
    assert r.tolist() == [0, 1, 16, 30]
    assert g.inside(r, c).tolist() == [True, True, True, False]


def test_project_points_per_cell_max():
    g = GridSpec(2, 2, 1.0, 1.0, 0.0, 0.0)
    cloud = cloud_of([0.5, 0.5, -2.0, 100, 10], [0.2, 0.1, 1.0, 50, 200], [1.5, 1.5, 4.0, 255, 0],
                     [9.0, 9.0, 4.0, 255, 255])
    img = project_points(cloud, g, scaled=False)
    np.testing.assert_allclose(img[0, 0], [1.0, 100, 200])
    np.testing.assert_allclose(img[1, 1], [4.0, 255, 0])
    np.testing.assert_array_equal(img[0, 1], 0)
    scaled = project_points(cloud, g)
    assert scaled.min() >= 0 and scaled.max() <= 1
    np.testing.assert_allclose(scaled[0, 0], [0.5, 100 / 255, 200 / 255])


def test_project_empty_cloud():
    assert not project_points(np.zeros((0, 5)), GridSpec()).any()


def test_pillarize_keeps_first_points_in_order():
    g = GridSpec(1, 2, 1.0, 1.0, 0.0, 0.0)
    pts = [[0.1 * k, 0.5, 0.0, 10 * k, 0] for k in range(1, 6)] + [[1.5, 0.5, 0, 0, 0]]
    sp = pillarize(cloud_of(*pts), g, n_p=3)
    assert sp.features.shape == (2, 3, N_C)
    assert sp.counts.tolist() == [3, 1]
    np.testing.assert_allclose(sp.features[0, :, 3] * 255, [10, 20, 30])
    np.testing.assert_allclose(sp.features[1, 0, 5:], [0.0, 0.0])  # at the cell centre
    np.testing.assert_allclose(sp.features[0, 0, 5:], [-0.4, 0.0])
    np.testing.assert_array_equal(sp.features[1, 1:], 0)


def test_slot_mask():
    np.testing.assert_array_equal(slot_mask(np.array([0, 2]), 3), [[0, 0, 0], [1, 1, 0]])


def test_pillar_encode_ignores_padded_slots():
    rng = ad.make_rng(0)
    w = {k: Tensor(v.astype(np.float64)) for k, v in init_pillar_encoder(rng, 4).items()}
    feats = rng.standard_normal((1, 4, 3, N_C))
    mask = slot_mask(np.array([1, 2, 0, 3]), 3)[None, ..., None]
    out = pillar_encode(Tensor(feats), Tensor(mask), 2, 2, w).data
    feats2 = feats.copy()
    feats2[0, 0, 1:] = 99.0  # garbage in padded slots
    out2 = pillar_encode(Tensor(feats2), Tensor(mask), 2, 2, w).data
    np.testing.assert_array_equal(out, out2)
    assert out.shape == (1, 2, 2, 4)
    np.testing.assert_array_equal(out[0, 1, 0], 0)  # empty pillar


def test_grid_rejects_bad_dims():
    with pytest.raises(ValueError):
        GridSpec(0, 4)
    with pytest.raises(ValueError):
        GridSpec(4, 4, cell_dx=0.0)


def test_refine():
    g = GridSpec().refine(8)
    assert g.shape == (256, 256) and np.isclose(g.x_max, GridSpec().x_max)
