import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from owdet.energy import head_score
from owdet.head import (BACKGROUND, BOX_SCALE, ORIGIN_CURR, ORIGIN_NONE, ORIGIN_PREV, P_CLAMP,
                        PSEUDO_UNKNOWN, HeadParams, calibrate_unknown, forward, joint_logits,
                        tag_origin, unknown_logit)

vec = arrays(np.float64, st.integers(2, 30), elements=st.floats(-20, 20))


def identity_head(d, num_known=3):
    p = HeadParams.init(np.random.default_rng(0), d, d, num_known)
    p.feat_w = np.eye(d)
    return p


class TestForward:
    def test_affine_at_origin(self):
        p = identity_head(4)
        p.feat_b = np.array([1.0, -2.0, 0.5, 0.0])
        out = forward(p, np.zeros((1, 4)))
        np.testing.assert_array_equal(out.features[0], p.feat_b)

    def test_class_logits_scale_free(self, rng):
        p = identity_head(6)
        p.cls_w = rng.normal(0, 1, p.cls_w.shape)
        x = rng.normal(0, 1, (3, 6))
        np.testing.assert_allclose(forward(p, x).z_cls, forward(p, 2 * x).z_cls, atol=1e-12)

    def test_twenty_classes_plus_unknown(self):
        p = HeadParams.init(np.random.default_rng(0), 8, 16, 20)
        assert forward(p, np.ones((2, 8))).z_cls.shape == (2, 21)

    def test_zero_feature_safe(self):
        p = identity_head(3)
        out = forward(p, np.zeros((1, 3)))
        assert np.all(out.unit == 0) and np.all(np.isfinite(out.z_cls))

    def test_box_residual(self, rng):
        p = identity_head(4)
        p.box_w = rng.normal(0, 1, (4, 4))
        x = rng.normal(0, 1, (2, 4))
        boxes = np.array([[0.1, 0.1, 0.5, 0.5], [0.2, 0.3, 0.6, 0.9]])
        out = forward(p, x, boxes)
        np.testing.assert_allclose(out.z_bbox, boxes + BOX_SCALE * (x @ p.box_w.T), atol=1e-15)

    def test_objectness_uses_norm(self, rng):
        p = identity_head(4)
        p.obj_w, p.obj_b = np.array(2.0), np.array(-1.0)
        x = rng.normal(0, 1, (3, 4))
        want = 2.0 * np.linalg.norm(x, axis=1) / math.sqrt(4) - 1.0
        np.testing.assert_allclose(forward(p, x).z_obj, want, atol=1e-12)


class TestJointLogits:
    def test_two_nodes(self):
        z = joint_logits(np.zeros(2), 0.0)
        np.testing.assert_allclose(z, [-math.log(3)] * 2, atol=1e-12)

    def test_objectness_gate(self):
        z = joint_logits(np.zeros(3), -1e4)
        floor = math.log(P_CLAMP) - math.log1p(-P_CLAMP)
        np.testing.assert_allclose(z, floor, atol=1e-9)

    @given(vec, st.floats(-50, 50), st.floats(-10, 10))
    def test_shift_invariant(self, z, c, obj):
        np.testing.assert_allclose(joint_logits(z + c, obj), joint_logits(z, obj), atol=1e-9)

    @given(vec, st.floats(-10, 10))
    def test_matches_probability_form(self, z, obj):
        p = np.exp(z - z.max())
        p = p / p.sum() / (1 + math.exp(-obj))
        p = np.clip(p, P_CLAMP, 1 - P_CLAMP)
        np.testing.assert_allclose(joint_logits(z, obj), np.log(p / (1 - p)), atol=1e-8)


class TestUnknownLogit:
    def test_uniform(self):
        assert unknown_logit([0, 0, 0, 0]) == pytest.approx(math.log(4))

    def test_single(self):
        assert unknown_logit([10.0]) == 10.0

    @given(vec)
    def test_equals_head_score(self, z):
        assert unknown_logit(z) == head_score(z)

    def test_empty(self):
        with pytest.raises(ValueError):
            unknown_logit([])


class TestCalibration:
    def test_degenerate_logit_spread(self):
        np.testing.assert_array_equal(calibrate_unknown([3.0, 3.0], [1.0, -1.0]), [3.0, 3.0])

    def test_worked_example(self):
        np.testing.assert_allclose(calibrate_unknown([5.0, 1.0], [1.0, -1.0]), [7.0, -1.0],
                                   atol=1e-12)

    @given(vec, st.floats(-100, 100))
    def test_equal_offsets_identity(self, z, c):
        np.testing.assert_array_equal(calibrate_unknown(z, np.full(len(z), c)), z)

    @given(vec, arrays(np.float64, 30, elements=st.floats(-20, 20)))
    def test_mean_term_zero(self, z, off):
        off = off[:len(z)]
        assume(off.std() > 1e-6)
        term = calibrate_unknown(z, off) - z
        assert abs(term.mean()) < 1e-9

    @given(vec, arrays(np.float64, 30, elements=st.floats(-20, 20)),
           st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
    def test_affine_invariance(self, z, off, a, b):
        off = off[:len(z)]
        assume(off.std() > 1e-3)
        np.testing.assert_allclose(calibrate_unknown(z, a * off + b), calibrate_unknown(z, off),
                                   atol=1e-9)

    def test_population_std(self, rng):
        z = rng.normal(0, 2, 9)
        off = rng.normal(0, 1, 9)
        want = z + z.std(ddof=0) * (off - off.mean()) / off.std(ddof=0)
        np.testing.assert_allclose(calibrate_unknown(z, off), want, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            calibrate_unknown([1.0, 2.0], [1.0])


class TestParams:
    def test_flat_roundtrip(self, rng):
        p = HeadParams.init(rng, 5, 8, 3)
        q = p.with_flat(p.flat())
        for a, b in zip(p.arrays(), q.arrays()):
            np.testing.assert_array_equal(a, b)
        assert q.norm_scale == p.norm_scale and q.box_scale == p.box_scale

    def test_step(self, rng):
        p = HeadParams.init(rng, 5, 8, 3)
        g = p.with_flat(rng.normal(0, 1, p.flat().size))
        np.testing.assert_allclose(p.step(g, 0.1).flat(), p.flat() - 0.1 * g.flat(), atol=0)

    def test_add_task_keeps_unknown_last(self, rng):
        p = HeadParams.init(rng, 5, 8, 3)
        p.cls_w[-1] = 7.0
        q = p.add_task(rng, 2)
        assert q.num_known == 5 and q.num_prev == 3
        np.testing.assert_array_equal(q.cls_w[-1], 7.0)
        np.testing.assert_array_equal(q.cls_w[:3], p.cls_w[:3])
        assert [s.stop - s.start for s in q.task_slices()] == [3, 2]

    def test_to_dict(self, rng):
        d = HeadParams.init(rng, 2, 4, 1).to_dict()
        assert d["task_sizes"] == [1] and len(d["feat_w"]) == 4


class TestTagOrigin:
    def test_tags(self):
        labels = np.array([0, 1, 2, 3, PSEUDO_UNKNOWN, BACKGROUND])
        np.testing.assert_array_equal(
            tag_origin(labels, 2),
            [ORIGIN_PREV, ORIGIN_PREV, ORIGIN_CURR, ORIGIN_CURR, ORIGIN_NONE, ORIGIN_NONE])
