import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lldn.bev import GridSpec
from lldn.heuristic import (HeuristicConfig, dbscan_cluster, fit_and_rasterize, fit_line,
                            heuristic_detect, threshold_points)
from lldn.metrics import (CSV_HEADER, Counts, confusion_classification, confusion_confidence,
                          dilate3x3, evaluate_dataset, f1_from_counts, threshold_confidence)
from lldn.synth import TAGS, SceneConfig, generate_frame, make_frames


def test_f1_examples():
    assert f1_from_counts(Counts(0, 0, 0)) == 1.0
    assert f1_from_counts(Counts(0, 3, 0)) == 0.0
    assert f1_from_counts(Counts(4, 2, 2)) == 4 / 6


def test_threshold_is_strict():
    np.testing.assert_array_equal(threshold_confidence(np.array([0.5, 0.50001, 0.2])), [False, True, False])


def test_one_cell_offset_is_tolerated():
    label = np.zeros((5, 5), bool)
    label[2, 2] = True
    pred = np.zeros((5, 5), bool)
    pred[3, 3] = True
    assert confusion_confidence(pred, label) == Counts(1, 0, 0)
    pred[3, 3], pred[4, 4] = False, True
    assert confusion_confidence(pred, label) == Counts(0, 1, 1)


def test_dilate_clips_at_border():
    m = np.zeros((3, 4), bool)
    m[0, 0] = True
    assert dilate3x3(m).sum() == 4


def test_classification_ties_go_to_lower_index():
    probs = np.zeros((1, 1, 7))
    probs[0, 0, [2, 5]] = 0.5
    label = np.array([[2]])
    per = confusion_classification(probs, label)
    assert per[2] == Counts(1, 0, 0) and per[5] == Counts(0, 0, 0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        confusion_confidence(np.zeros((2, 2)), np.zeros((3, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(bool, (6, 7)), arrays(bool, (6, 7)))
def test_counts_bounds(pred, label):
    c = confusion_confidence(pred, label)
    assert c.tp + c.fp == pred.sum()
    assert c.fn <= label.sum()
    assert 0.0 <= c.f1 <= 1.0


@pytest.fixture(scope="module")
def frames():
    return make_frames(10, seed=3, points=3000)


def test_report_slices_and_csv(frames):
    rep = evaluate_dataset(frames, lambda f: ((f.label > 0).astype(float), np.eye(7)[f.label]))
    csv = rep.to_csv().splitlines()
    assert csv[0] == CSV_HEADER
    names = [line.split(",")[0] for line in csv[1:] if not line.startswith("#")]
    assert names == [*TAGS, "total"]
    assert rep.total.conf.f1 == 1.0 and rep.total.cls.f1 == 1.0
    occ = [rep.slices[t].conf for t in TAGS[8:]]
    assert sum((c.tp for c in occ)) == rep.total.conf.tp  # disjoint occlusion slices partition the total
    assert sum(rep.slices[t].frames for t in TAGS[8:]) == rep.total.frames == 10
    assert rep.fps > 0


def test_threads_do_not_change_counts(frames):
    det = lambda f: (heuristic_detect(f.cloud, f.grid), None)
    one = evaluate_dataset(frames, det, threads=1).to_csv()
    four = evaluate_dataset(frames, det, threads=4).to_csv()
    assert one == four
    assert ",n/a,n/a,n/a,n/a" in one


def test_mixed_grids_rejected(frames):
    other = generate_frame(SceneConfig(points=100), 0, GridSpec(16, 16))
    with pytest.raises(ValueError):
        evaluate_dataset([frames[0], other], lambda f: (f.label > 0, None))


# -- heuristic -----------------------------------------------------------------

def test_dbscan_examples():
    pts = np.array([[0, 0], [0.5, 0], [1.0, 0], [10, 10], [1.5, 0.4]])
    labels = dbscan_cluster(pts, eps=0.6, min_pts=2)
    assert labels.tolist() == [0, 0, 0, -1, -1]  # last point is 0.64 away
    assert dbscan_cluster(np.zeros((0, 2)), 1.0, 2).tolist() == []
    with pytest.raises(ValueError):
        dbscan_cluster(pts, eps=0.0, min_pts=2)


def test_border_point_joins_first_cluster():
    # the middle point has only 3 neighbours (itself included) but touches a core of each group
    left = np.column_stack([np.arange(4) * 0.1, np.zeros(4)])
    right = np.column_stack([2.2 + np.arange(4) * 0.1, np.zeros(4)])
    pts = np.vstack([left, [[1.25, 0.0]], right])
    labels = dbscan_cluster(pts, eps=1.0, min_pts=4)
    assert labels.tolist() == [0, 0, 0, 0, 0, 1, 1, 1, 1]


def test_fit_line():
    x = np.linspace(0, 10, 20)
    a, b = fit_line(np.column_stack([x, 0.1 * x - 2]))
    assert np.isclose(a, 0.1) and np.isclose(b, -2)
    assert fit_line(np.array([[1.0, 0], [1.0, 2]])) is None


def test_vertical_cluster_fallback():
    g = GridSpec()
    pts = np.column_stack([np.full(10, 5.0), np.linspace(-3, 3, 10)])
    out = fit_and_rasterize(pts, np.zeros(10, int), g, 8)
    assert out.sum() > 1 and len(np.unique(np.nonzero(out)[1])) == 1


def test_threshold_points_strict():
    cloud = np.array([[0, 0, 0, 128.0, 0], [1, 1, 0, 129.0, 0]])
    assert threshold_points(cloud).tolist() == [[1.0, 1.0]]


def test_heuristic_finds_clean_lanes():
    f = generate_frame(SceneConfig(lane_count=3, noise=0.0), 5)
    pred = heuristic_detect(f.cloud, f.grid)
    c = confusion_confidence(pred > 0.5, f.label > 0)
    assert c.fp == 0 and c.f1 > 0.7  # range falloff starves the far end


def test_heuristic_config_validation():
    with pytest.raises(ValueError):
        HeuristicConfig(eps=0)
