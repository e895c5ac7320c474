import json

import numpy as np
import pytest

from cannyedit.edit import (EditConfig, EditRequest, Editor, NoComponent, cfg_guidance, edit, patch_deviation,
                            refine_mask, refine_switch_step, removal_guidance, salient_points)
from cannyedit.errors import InvalidRequest, ShapeMismatch
from cannyedit.mmdit import Model, ModelConfig
from cannyedit.train import add_task

TINY = ModelConfig(dim=16, heads=2, multi_stream_blocks=2, single_stream_blocks=1, time_features=8, seed=2)
FAST = dict(n_steps=4)


@pytest.fixture(scope="module")
def editor():
    return Editor(Model.create(TINY))


@pytest.fixture(scope="module")
def task():
    return add_task(0)


def _request(t, **kw):
    base = dict(task="add", source_image=t.sample.image, local_prompts=(t.local_prompt,),
                source_prompt=t.sample.caption, target_prompt=t.target_prompt, masks=(t.region,),
                config=EditConfig(**FAST))
    base.update(kw)
    return EditRequest(**base)


def test_guidance_formulas():
    vp, vn = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    assert np.allclose(removal_guidance(vp, vn, 4.0), vn + 4 * (vp - vn))
    assert np.array_equal(removal_guidance(vp, vn, 1.0), vp)
    assert np.allclose(cfg_guidance(vp, vn, 2.0), [1.5, 5.0])
    with pytest.raises(ShapeMismatch, match="shape-mismatch"):
        removal_guidance(vp, np.zeros(3), 2.0)
    with pytest.raises(InvalidRequest):
        removal_guidance(vp, vn, 0.5)


def test_config_validation_and_variants():
    with pytest.raises(InvalidRequest):
        EditConfig(beta=-0.1)
    with pytest.raises(InvalidRequest):
        EditConfig(t_refine=1.0)
    with pytest.raises(InvalidRequest):
        EditConfig(no_cc=True, full_cc=True)
    with pytest.raises(InvalidRequest):
        EditConfig.for_variant("nonsense")
    assert EditConfig().variant == "selective"
    assert EditConfig.for_variant("no_cc", n_steps=3).variant == "no_cc"
    assert EditConfig(full_cc=True, local_prompt_only=True).variant == "full_cc+local_prompt_only"


def test_request_validation(task):
    with pytest.raises(InvalidRequest):
        _request(task, points=((0.5, 0.5),)).validate()
    with pytest.raises(InvalidRequest):
        _request(task, masks=None, points=((0.5, 0.5),), task="replace").validate()
    with pytest.raises(InvalidRequest):
        _request(task, masks=None, points=((0.5, 0.5),), refine=False).validate()
    with pytest.raises(InvalidRequest):
        _request(task, task="remove").validate()
    with pytest.raises(InvalidRequest):
        _request(task, local_prompts=("a", "b")).validate()


def test_salient_points_ranking_and_ties():
    grid = (2, 2)
    w = np.zeros((1, 1, 6, 6))
    w[0, 0, 3, 4] = 1.0
    w[0, 0, 1, 4] = 0.5
    w[0, 0, 2, 4] = 0.5
    pts = salient_points([("ms0", w)], slice(4, 5), 3, grid)
    assert pts == [(1, 1), (0, 1), (1, 0)]
    with pytest.raises(ValueError, match="empty-record"):
        salient_points([], slice(4, 5), 1, grid)


def test_refine_mask_components_and_bound():
    src = np.zeros((16, 16, 3))
    prev = src.copy()
    prev[0:8, 0:4] = 1.0       # component A: patches (0,0),(1,0)
    prev[12:16, 12:16] = 1.0   # component B: patch (3,3)
    assert patch_deviation(prev, src, 4)[0, 0] == 1.0
    m = refine_mask(prev, src, [(0, 0)], 0.5, 4)
    assert m.sum() == 2 and m[1, 0]
    both = refine_mask(prev, src, [(1, 0), (3, 3)], 0.5, 4)
    assert both.sum() == 3
    bound = np.zeros((4, 4), dtype=bool)
    bound[0, 0] = True
    assert refine_mask(prev, src, [(0, 0)], 0.5, 4, bound).sum() == 1
    with pytest.raises(NoComponent):
        refine_mask(prev, src, [(2, 2)], 0.5, 4)
    with pytest.raises(ShapeMismatch):
        refine_mask(prev[:8], src, [(0, 0)], 0.5, 4)


def test_refine_switch_step():
    assert refine_switch_step(EditConfig(n_steps=50, t_refine=0.3)) == 35
    assert refine_switch_step(EditConfig(n_steps=50, t_refine=0.001)) == 50
    assert refine_switch_step(EditConfig(n_steps=50, t_refine=0.999)) == 0


@pytest.mark.parametrize("method,nfe", [("second_order", 3 * 5), ("euler", 4 + 2 * 4)])
def test_mask_edit_runs_and_counts_evaluations(editor, task, method, nfe):
    req = _request(task, config=EditConfig(n_steps=4, method=method))
    img, rep = edit(editor, req)
    assert img.data.shape == (32, 32, 3) and np.isfinite(img.data).all()
    assert rep.nfe == nfe and rep.variant == "selective"
    assert rep.masks == [task.region.astype(int).tolist()]
    assert set(rep.scores) >= {"background_mse", "psnr", "edge_iou_outside_mask", "region_target_score"}
    json.loads(rep.to_json())


def test_edit_is_deterministic(editor, task):
    a = edit(editor, _request(task))[0].data
    b = edit(editor, _request(task))[0].data
    assert np.array_equal(a, b)


def test_pixel_masks_are_accepted(editor, task):
    px = np.repeat(np.repeat(task.region, 4, 0), 4, 1)
    a = edit(editor, _request(task))[0].data
    b = edit(editor, _request(task, masks=(px,)))[0].data
    assert np.array_equal(a, b)
    with pytest.raises(InvalidRequest):
        edit(editor, _request(task, masks=(np.ones((5, 5), dtype=bool),)))
    with pytest.raises(InvalidRequest):
        edit(editor, _request(task, source_image=np.zeros((16, 16, 3))))


def _cache_of(editor, req):
    caches = []
    orig = Editor.invert

    def spy(self, *a, **kw):
        out = orig(self, *a, **kw)
        caches.append(out[1])
        return out

    Editor.invert = spy
    try:
        edit(editor, req)
    finally:
        Editor.invert = orig
    return caches[0]


def test_control_reads_one_entry_per_block_and_step(editor, task):
    cache = _cache_of(editor, _request(task))
    n = 4
    expected = [(b, key) for key in [2 * n] + [2 * k - 1 for k in range(n, 0, -1)] for b in range(2)]
    assert cache.reads == expected


@pytest.mark.parametrize("variant", ["no_cc", "cc_from_current_pass"])
def test_uncached_variants_read_nothing(editor, task, variant):
    assert _cache_of(editor, _request(task, config=EditConfig.for_variant(variant, **FAST))).reads == []


@pytest.mark.parametrize("variant", ["no_cc", "full_cc", "cc_from_current_pass", "local_prompt_only",
                                     "target_prompt_only"])
def test_variants_run(editor, task, variant):
    img, rep = edit(editor, _request(task, config=EditConfig.for_variant(variant, **FAST)))
    assert rep.variant == variant and np.isfinite(img.data).all()


def test_replace_and_remove(editor):
    t = add_task(1)
    shape_box = t.sample.shapes[0].bbox
    m = np.zeros((32, 32), dtype=bool)
    m[shape_box[1]:shape_box[3], shape_box[0]:shape_box[2]] = True
    base = dict(source_image=t.sample.image, source_prompt=t.sample.caption, masks=(m,),
                config=EditConfig(**FAST))
    _, rep = edit(editor, EditRequest(task="replace", local_prompts=("red circle",), target_prompt="red circle",
                                      **base))
    assert rep.task == "replace"
    _, rep = edit(editor, EditRequest(task="remove", local_prompts=("empty background",),
                                      target_prompt="empty background",
                                      negative_prompt=t.sample.shapes[0].label, **base))
    assert rep.prompts["negative"] == t.sample.shapes[0].label
    assert "region_target_score" not in rep.scores or rep.scores["region_target_score"] is None


def test_point_hint_two_stage(editor, task):
    req = _request(task, masks=None, points=(task.centroid,))
    _, rep = edit(editor, req)
    assert rep.refine_step == refine_switch_step(req.config)
    assert len(rep.salient_points[0]) == req.config.salient_k
    assert len(rep.refine_fallback) == 1
    m = np.array(rep.masks[0], dtype=bool)
    # never wider than the bound around the hint support
    from cannyedit.masks import dilate, hint_support, soft_mask_from_point
    support = hint_support(soft_mask_from_point(task.centroid, TINY.grid))
    assert not (m & ~dilate(support, req.config.refine_bound)).any()


def test_refine_at_the_first_step(editor, task):
    req = _request(task, masks=None, points=(task.centroid,), config=EditConfig(n_steps=4, t_refine=0.001))
    _, rep = edit(editor, req)
    assert rep.refine_step == 4
    # one probe, then a fresh second-order solve: 1 + 2 * (4 + 1) guided halves + inversion
    assert rep.nfe == 5 + 2 * 1 + 2 * 5
