import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmm.sfac import (
    AnnotatedImage,
    Box,
    bilinear_resize,
    image_ratio,
    prepare_attention,
    rasterize,
    read_annotations,
    sfac,
    sfac_report,
    size_bucket,
    write_annotations,
    write_report_csv,
)


@pytest.mark.parametrize(
    "area,bucket",
    [(1, "es"), (144, "es"), (145, "rs"), (400, "rs"), (401, "gs"), (1024, "gs"), (1025, "nl")],
)
def test_bucket_boundaries(area, bucket):
    assert size_bucket(area) == bucket


def test_axis_aligned_box_covers_w_times_h():
    assert rasterize(Box(5.0, 4.0, 6.0, 2.0), 10, 12).size == 12
    idx = rasterize(Box(2.0, 1.0, 2.0, 2.0), 4, 4)
    np.testing.assert_array_equal(idx, [1, 2, 5, 6])


def test_rotated_box_by_quarter_turn_swaps_extents():
    a = rasterize(Box(8.0, 8.0, 6.0, 2.0, 90.0), 16, 16)
    b = rasterize(Box(8.0, 8.0, 2.0, 6.0, 0.0), 16, 16)
    np.testing.assert_array_equal(np.sort(a), np.sort(b))


def test_bilinear_hand_values():
    a = np.array([[0.0, 1.0], [2.0, 3.0]])
    up = bilinear_resize(a, 4, 4)
    # half-pixel centres: output 1 samples input 0.25, clamped at the edges
    np.testing.assert_allclose(up[0], [0.0, 0.25, 0.75, 1.0], atol=1e-15)
    np.testing.assert_allclose(up[:, 0], [0.0, 0.5, 1.5, 2.0], atol=1e-15)
    np.testing.assert_allclose(up[1, 1], 0.75 * 0.25 * 1 + 0.25 * 0.75 * 2 + 0.25 * 0.25 * 3, atol=1e-15)


def test_prepare_attention_scaling():
    a = np.array([[1.0, 3.0], [5.0, 2.0]])
    out = prepare_attention(a, 2, 2)
    np.testing.assert_allclose(out, [[0.0, 127.5], [255.0, 63.75]])
    assert np.all(prepare_attention(np.full((3, 3), 7.0), 6, 6) == 0)


def test_ratio_matches_pixel_summation(rng):
    H, W = 20, 24
    att = rng.uniform(size=(H, W))
    boxes = [Box(3.0, 3.0, 4.0, 4.0), Box(16.0, 12.0, 12.0, 13.0)]
    img = AnnotatedImage.from_boxes(att, H, W, boxes)
    I = prepare_attention(att, H, W)
    inside = np.zeros((H, W), bool)
    inside[1:5, 1:5] = True
    other = np.zeros((H, W), bool)
    other[5:18, 10:22] = True
    inside_sum = sum(I[i, j] for i in range(H) for j in range(W) if inside[i, j] or other[i, j])
    bg = sum(I[i, j] for i in range(H) for j in range(W) if not (inside[i, j] or other[i, j]))
    assert image_ratio(img) == pytest.approx(inside_sum / bg, rel=1e-12)
    # per-bucket: only the 16-pixel box is chosen; the 156-pixel one stays out of the background
    only_first = sum(I[i, j] for i in range(H) for j in range(W) if inside[i, j])
    assert image_ratio(img, "es") == pytest.approx(only_first / bg, rel=1e-12)


def test_uniform_map_ratio_unscaled(rng):
    H, W = 16, 16
    boxes = [Box(4.0, 4.0, 4.0, 4.0), Box(12.0, 10.0, 2.0, 6.0)]
    img = AnnotatedImage.from_boxes(np.full((4, 4), 3.0), H, W, boxes)
    area = 16 + 12
    value, n, excluded = sfac([img], scale=False)
    assert abs(value - area / (H * W - area)) < 1e-9
    assert (n, excluded) == (1, 0)


def test_uniform_map_scaled_is_excluded():
    img = AnnotatedImage.from_boxes(np.ones((4, 4)), 8, 8, [Box(2.0, 2.0, 2.0, 2.0)])
    value, n, excluded = sfac([img])
    assert math.isnan(value) and n == 0 and excluded == 1


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 2**31 - 1))
def test_positive_rescaling_invariance(c, seed):
    r = np.random.default_rng(seed)
    att = r.uniform(size=(6, 6))
    boxes = [Box(4.0, 4.0, 4.0, 2.0)]
    for scale in (True, False):
        a = sfac([AnnotatedImage.from_boxes(att, 12, 12, boxes)], scale=scale)[0]
        b = sfac([AnnotatedImage.from_boxes(att * c, 12, 12, boxes)], scale=scale)[0]
        assert abs(a - b) < 1e-9 * max(1.0, abs(a))


def test_report_buckets_and_empty_buckets(rng):
    img = AnnotatedImage.from_boxes(rng.uniform(size=(8, 8)), 64, 64, [Box(10.0, 10.0, 10.0, 10.0)])
    rep = sfac_report([img])
    assert rep.counts == {"all": 1, "es": 1, "rs": 0, "gs": 0, "nl": 0}
    assert rep.sfac_es == rep.sfac_all
    assert math.isnan(rep.sfac_nl)


def test_planted_mass_raises_sfac(rng):
    boxes = [Box(8.0, 8.0, 6.0, 6.0)]
    base = rng.uniform(size=(16, 16))
    planted = base.copy()
    planted[5:11, 5:11] += 1.0
    a = sfac([AnnotatedImage.from_boxes(base, 16, 16, boxes)])[0]
    b = sfac([AnnotatedImage.from_boxes(planted, 16, 16, boxes)])[0]
    assert b > a


def test_validation():
    with pytest.raises(ValueError):
        sfac([])
    with pytest.raises(ValueError):
        AnnotatedImage(np.zeros(4), 2, 2)
    with pytest.raises(ValueError):
        AnnotatedImage(np.zeros((2, 2)), 2, 2, [np.array([4])])
    with pytest.raises(ValueError):
        sfac([AnnotatedImage(np.zeros((2, 2)), 2, 2)], bucket="xl")


def test_annotation_round_trip(tmp_path):
    boxes = {"a": [Box(1.5, 2.0, 3.0, 4.0, 30.0, "car")], "b": [Box(5.0, 6.0, 7.0, 8.0, 0.0, "truck")]}
    path = tmp_path / "ann.csv"
    write_annotations(path, boxes)
    assert read_annotations(path) == boxes


def test_bad_annotation_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,1,2,3\n")
    with pytest.raises(ValueError):
        read_annotations(path)


def test_report_csv(tmp_path, rng):
    img = AnnotatedImage.from_boxes(rng.uniform(size=(8, 8)), 8, 8, [Box(4.0, 4.0, 2.0, 2.0)])
    write_report_csv(tmp_path / "r.csv", sfac_report([img]))
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "bucket,sfac,targets,images,excluded"
    assert len(lines) == 6
