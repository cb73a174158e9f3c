import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopweight import nn
from coopweight import perception as pc
from coopweight.perception import Detection, SceneConfig

from . import oracles


def box(x, y, w=2.0, length=4.0, theta=0.0):
    return np.array([x, y, 0.8, w, length, 1.6, theta])


box_st = st.builds(
    box,
    st.floats(0, 64), st.floats(0, 64), st.floats(0.5, 5), st.floats(0.5, 8), st.floats(-0.7, 0.7),
)


@pytest.fixture(scope="module")
def scenes():
    return pc.generate_scenes(SceneConfig(), 40, seed=3)


class TestScenes:
    def test_invariants(self, scenes):
        cfg = SceneConfig()
        for s in scenes:
            assert cfg.min_objects <= len(s.boxes) <= cfg.max_objects
            assert s.agents.shape == (3, 2)
            assert s.visible.shape == (3, len(s.boxes))
            # every object is seen by somebody
            assert s.visible.any(axis=0).all()
            d = np.hypot(*(s.agents[1:] - s.agents[0]).T)
            assert np.all(d <= cfg.cav_max_dist + 1e-9)
            assert np.all(np.abs(s.boxes[:, 6]) <= cfg.theta_max)

    def test_same_seed_same_scenes(self):
        a = pc.generate_scenes(SceneConfig(), 3, seed=11)
        b = pc.generate_scenes(SceneConfig(), 3, seed=11)
        assert [s.to_json() for s in a] == [s.to_json() for s in b]

    def test_jsonl_round_trip(self, scenes, tmp_path):
        path = tmp_path / "s.jsonl"
        pc.write_scenes(path, scenes[:5])
        back = pc.read_scenes(path)
        assert len(back) == 5
        for s, t in zip(scenes, back):
            np.testing.assert_array_equal(s.boxes, t.boxes)
            np.testing.assert_array_equal(s.visible, t.visible)
            np.testing.assert_array_equal(pc.agent_rasters(s, SceneConfig()), pc.agent_rasters(t, SceneConfig()))

    @pytest.mark.parametrize("kwargs", [{"sensing_radius": 0}, {"num_cavs": 0}, {"dropout": 1.0},
                                        {"min_objects": 5, "max_objects": 2}])
    def test_bad_scene_config(self, kwargs):
        with pytest.raises(ValueError):
            SceneConfig(**kwargs)

    def test_ego_misses_something(self, scenes):
        assert np.mean([pc.ego_miss_fraction(s) for s in scenes]) > 0.1


class TestRaster:
    def test_only_visible_objects(self):
        cfg = SceneConfig(clutter=0.0)
        scene = pc.Scene(np.stack([box(10, 10), box(50, 50)]), np.array([[10.0, 10], [50, 50]]),
                         np.array([[True, False], [False, True]]), clutter_seed=0)
        ego = pc.rasterize(scene, 0, cfg)
        assert ego.shape == (64, 64)
        assert ego[10, 10] == 1.0 and ego[50, 50] == 0.0
        # area of a 2 x 4 m box on a 1 m grid
        assert ego.sum() == pytest.approx(8.0, abs=0.5)

    def test_values_in_unit_range(self, scenes):
        r = pc.agent_rasters(scenes[0], SceneConfig())
        assert r.shape == (3, 64, 64)
        assert r.min() >= 0 and r.max() <= 1


class TestBoxCoding:
    @given(box_st, box_st)
    def test_residuals_match_loop(self, gt, anchor):
        np.testing.assert_allclose(pc.box_residuals(gt, anchor), oracles.residual_loop(gt, anchor), atol=1e-12)

    @given(box_st, box_st)
    def test_decode_inverts_encode(self, gt, anchor):
        back = pc.decode_residuals(pc.box_residuals(gt, anchor), anchor)
        np.testing.assert_allclose(back, gt, atol=1e-9)

    def test_rejects_non_positive_size(self):
        with pytest.raises(ValueError):
            pc.box_residuals(box(0, 0, w=0.0), box(0, 0))

    def test_anchors(self):
        a = pc.make_anchors(SceneConfig())
        assert a.shape == (256, 7)
        np.testing.assert_allclose(a[0, :2], [2, 2])
        np.testing.assert_allclose(a[1, :2], [6, 2])  # row-major, x varies fastest


class TestIou:
    @given(box_st, box_st)
    def test_symmetric_and_bounded(self, a, b):
        v = pc.iou(a, b)
        assert 0.0 <= v <= 1.0 + 1e-12
        assert v == pytest.approx(pc.iou(b, a))

    @given(box_st)
    def test_self_is_one(self, a):
        assert pc.iou(a, a) == pytest.approx(1.0)

    def test_hand_cases(self):
        assert pc.iou(box(0, 0, 2, 2), box(1, 0, 2, 2)) == pytest.approx(2 / 6)
        assert pc.iou(box(0, 0, 2, 2), box(5, 0, 2, 2)) == 0.0
        assert pc.iou(box(0, 0, 2, 2), box(0, 0, 1, 1)) == pytest.approx(0.25)

    def test_matrix_shape(self):
        assert pc.iou_matrix(np.stack([box(0, 0)] * 3), np.stack([box(1, 1)] * 2)).shape == (3, 2)


class TestTargets:
    def test_every_box_gets_an_anchor(self, scenes):
        anchors = pc.make_anchors(SceneConfig())
        for s in scenes[:10]:
            t = pc.assign_targets(s.boxes, anchors)
            assert t.num_pos >= len(s.boxes) - 1  # two close boxes may share a best anchor
            assert np.all(t.residuals[t.labels != 1] == 0)

    def test_empty_scene(self):
        t = pc.assign_targets(np.zeros((0, 7)), pc.make_anchors(SceneConfig()))
        assert t.num_pos == 0 and np.all(t.labels == 0)

    def test_ignore_band(self):
        # iou with the box: 1.0, 4.8 / 11.2 = 0.43, 0.0
        anchors = np.stack([box(0, 0, 2, 4), box(0.8, 0, 2, 4), box(20, 0, 2, 4)])
        t = pc.assign_targets(np.stack([box(0, 0, 2, 4)]), anchors)
        np.testing.assert_array_equal(t.labels, [1, -1, 0])
        np.testing.assert_allclose(t.residuals[0], 0.0, atol=1e-12)


class TestNms:
    def test_suppresses_overlaps(self):
        boxes = np.stack([box(0, 0), box(0.1, 0), box(10, 10)])
        keep = pc.nms(boxes, np.array([0.5, 0.9, 0.4]), 0.1)
        assert keep == [1, 2]

    def test_keeps_disjoint(self):
        boxes = np.stack([box(0, 0), box(10, 0)])
        assert sorted(pc.nms(boxes, np.array([0.2, 0.3]), 0.1)) == [0, 1]


class TestAveragePrecision:
    def test_perfect(self):
        gt = [np.stack([box(0, 0), box(10, 10)])]
        dets = [[Detection(box(0, 0), 0.9), Detection(box(10, 10), 0.8)]]
        assert pc.average_precision(dets, gt, 0.7) == pytest.approx(1.0)

    def test_half_recall(self):
        gt = [np.stack([box(0, 0), box(10, 10)])]
        assert pc.average_precision([[Detection(box(0, 0), 0.9)]], gt, 0.5) == pytest.approx(0.5)

    def test_false_positive_ranked_first(self):
        gt = [np.stack([box(0, 0)])]
        dets = [[Detection(box(30, 30), 0.9), Detection(box(0, 0), 0.5)]]
        # precision 1/2 at full recall
        assert pc.average_precision(dets, gt, 0.5) == pytest.approx(0.5)

    def test_duplicate_counts_once(self):
        gt = [np.stack([box(0, 0)])]
        dets = [[Detection(box(0, 0), 0.9), Detection(box(0, 0), 0.8)]]
        assert pc.average_precision(dets, gt, 0.5) == pytest.approx(1.0)

    def test_threshold_matters(self):
        gt = [np.stack([box(0, 0, 2, 4)])]
        dets = [[Detection(box(0.5, 0, 2, 4), 0.9)]]  # iou = 1.5/2.5 = 0.6
        assert pc.average_precision(dets, gt, 0.5) == 1.0
        assert pc.average_precision(dets, gt, 0.7) == 0.0

    def test_empty_cases(self):
        assert pc.average_precision([[]], [np.zeros((0, 7))], 0.5) == 1.0
        assert pc.average_precision([[Detection(box(0, 0), 0.5)]], [np.zeros((0, 7))], 0.5) == 0.0
        assert pc.average_precision([[]], [np.stack([box(0, 0)])], 0.5) == 0.0

    @settings(max_examples=30)
    @given(st.lists(st.tuples(st.floats(0, 60), st.floats(0, 60), st.floats(0.01, 1)), max_size=6))
    def test_bounded(self, dets):
        gt = [np.stack([box(5, 5), box(30, 30)])]
        v = pc.average_precision([[Detection(box(x, y), s) for x, y, s in dets]], gt, 0.5)
        assert 0.0 <= v <= 1.0


@pytest.fixture(scope="module")
def model():
    return pc.PerceptionModel(seed=0)


class TestModel:
    def test_encode_shape_and_determinism(self, model, rng):
        view = rng.random((64, 64))
        f = pc.encode(view, model)
        assert f.shape == pc.FEATURE_SHAPE
        np.testing.assert_array_equal(f, pc.encode(view, pc.PerceptionModel(seed=0)))

    def test_encode_rejects_wrong_raster(self, model):
        with pytest.raises(ValueError, match="64"):
            model.encode(np.zeros((2, 32, 32)))

    def test_head_rejects_wrong_features(self, model):
        with pytest.raises(ValueError):
            model.head(nn.Tensor(np.zeros((1, 4, 16, 16))))

    def test_detect_head_returns_detections(self, model, rng):
        dets = pc.detect_head(pc.encode(rng.random((64, 64)), model), model, score_threshold=0.0)
        assert dets and all(isinstance(d, Detection) for d in dets)
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)

    def test_loss_positive_and_finite(self, model, scenes):
        rasters = np.stack([pc.rasterize(s, 0, SceneConfig()) for s in scenes[:4]])
        targets = [pc.assign_targets(s.boxes, model.anchors) for s in scenes[:4]]
        loss = pc.detection_loss(model.head(model.encode(rasters)), targets)
        assert np.isfinite(loss.data) and float(loss.data) > 0


class TestFusion:
    def test_no_shared_is_identity(self, rng):
        f = rng.normal(size=(8, 4, 4))
        np.testing.assert_array_equal(pc.fuse_attentive(f, []).data, f)

    def test_identical_maps_fuse_to_same(self, rng):
        f = rng.normal(size=(8, 4, 4))
        np.testing.assert_allclose(pc.fuse_attentive(f, [f.copy(), f.copy()]).data, f)

    def test_matches_explicit_attention(self, rng):
        ego, a, b = (rng.normal(size=(8, 3, 3)) for _ in range(3))
        att = pc.attention_weights(ego, [a, b])
        np.testing.assert_allclose(att.sum(axis=0), 1.0)
        manual = att[0] * ego + att[1] * a + att[2] * b
        np.testing.assert_allclose(pc.fuse_attentive(ego, [a, b]).data, manual, atol=1e-12)

    def test_batched_equals_single(self, rng):
        ego, a = rng.normal(size=(2, 3, 8, 4, 4))[:2]
        batched = pc.fuse_attentive(ego, [a]).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], pc.fuse_attentive(ego[i], [a[i]]).data, atol=1e-12)

    def test_zero_map_can_still_attract_attention(self, rng):
        ego = np.abs(rng.normal(size=(8, 2, 2)))
        att = pc.attention_weights(ego, [np.zeros_like(ego)])
        assert np.all(att[1] > 0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            pc.fuse_attentive(rng.normal(size=(8, 4, 4)), [rng.normal(size=(8, 2, 2))])
