import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cannyedit.errors import InvalidRequest, ShapeMismatch
from cannyedit.metrics import (CLASSES, background_mse, class_scores, edge_iou_outside_mask, iou, parse_class,
                               pixel_mask, proxy_scores, region_target_score, top_class)
from cannyedit.train import ShapeRecord, render


def _region(r0=2, c0=2, n=3, grid=8):
    m = np.zeros((grid, grid), dtype=bool)
    m[r0:r0 + n, c0:c0 + n] = True
    return m


def test_background_mse_against_a_loop():
    rng = np.random.default_rng(0)
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    mask = _region()
    total, count = 0.0, 0
    px = pixel_mask(mask, (32, 32))
    for y in range(32):
        for x in range(32):
            near = px[max(0, y - 2):y + 3, max(0, x - 2):x + 3].any()
            if not near:
                total += float(((a[y, x] - b[y, x]) ** 2).sum())
                count += 3
    mse, psnr = background_mse(a, b, mask)
    assert math.isclose(mse, total / count, rel_tol=1e-12)
    assert math.isclose(psnr, 10 * math.log10(1 / mse))


def test_identical_images():
    img = render([ShapeRecord("circle", "red", (2, 2, 12, 12))], 0.1)
    s = proxy_scores(img, img, _region(5, 5, 2))
    assert s.background_mse == 0.0 and s.psnr == math.inf and s.edge_iou_outside_mask == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_changes_inside_the_mask_do_not_move_background_scores(seed):
    # Canny thresholds are relative to the peak gradient, so keep the in-mask
    # change below the source's own contrast
    rng = np.random.default_rng(seed)
    src = render([ShapeRecord("square", "blue", (18, 18, 28, 28))], 0.2)
    mask = _region(0, 0, 3)
    edited = src.copy()
    edited[:12, :12] += rng.uniform(-0.05, 0.05, (12, 12, 3))
    s = proxy_scores(src, edited, mask, "red circle")
    assert s.background_mse == 0.0
    assert s.edge_iou_outside_mask == 1.0


def test_errors():
    a = np.zeros((32, 32, 3))
    with pytest.raises(ShapeMismatch, match="size-mismatch"):
        background_mse(a, np.zeros((16, 16, 3)), _region())
    with pytest.raises(InvalidRequest, match="empty-background"):
        background_mse(a, a, np.ones((8, 8), dtype=bool))
    with pytest.raises(ShapeMismatch):
        pixel_mask(np.zeros((5, 5)), (32, 32))
    with pytest.raises(InvalidRequest, match="unknown-class"):
        region_target_score(a, _region(), "purple square")
    with pytest.raises(InvalidRequest, match="empty-region"):
        class_scores(a, np.zeros((8, 8), dtype=bool))


def test_iou_and_parse_class():
    assert iou(np.zeros(3), np.zeros(3)) == 1.0
    assert iou(np.array([1, 1, 0]), np.array([0, 1, 1])) == 1 / 3
    assert parse_class("Blue square left") == "blue square"
    assert len(CLASSES) == 18


@pytest.mark.parametrize("label", CLASSES)
@pytest.mark.parametrize("bg", [0.0, 0.2])
def test_region_oracle_recognises_every_rendered_class(label, bg):
    color, shape = label.split()
    img = render([ShapeRecord(shape, color, (9, 9, 19, 19))], bg)
    mask = _region(2, 2, 3)
    scores = class_scores(img, mask)
    assert top_class(scores) == label
    assert scores[label] == pytest.approx(1.0)


def test_region_score_ignores_pixels_outside_the_region():
    img = render([ShapeRecord("triangle", "green", (9, 9, 19, 19))], 0.1)
    noisy = img.copy()
    noisy[24:] = np.random.default_rng(0).random((8, 32, 3))
    mask = _region(2, 2, 3)
    assert region_target_score(img, mask, "green triangle") == region_target_score(noisy, mask, "green triangle")


def test_empty_region_scores_zero():
    img = np.full((32, 32, 3), 0.1)
    assert max(class_scores(img, _region()).values()) == 0.0


def test_wrong_colour_or_shape_scores_lower():
    img = render([ShapeRecord("square", "blue", (9, 9, 19, 19))], 0.0)
    s = class_scores(img, _region(2, 2, 3))
    assert s["blue square"] > s["blue circle"] > s["red square"]


def test_bright_in_mask_content_rescales_edge_thresholds():
    src = render([ShapeRecord("square", "blue", (18, 18, 28, 28))], 0.2)
    edited = src.copy()
    edited[:12, :12] = np.random.default_rng(0).random((12, 12, 3))
    assert edge_iou_outside_mask(src, edited, _region(0, 0, 3)) < 1.0


def test_edge_iou_detects_background_damage():
    src = render([ShapeRecord("square", "blue", (18, 18, 28, 28))], 0.2)
    edited = src.copy()
    edited[18:28, 18:28] = 0.2
    assert edge_iou_outside_mask(src, edited, _region(0, 0, 2)) < 0.2
