import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hssda.augment import RigidTransform, apply_transform_boxes, sample_weak_transform
from hssda.geom3d import Box3D, Detection, PointCloud, iou_3d
from hssda.scene import Scene
from hssda.threshold_gen import (ClassThresholds, ConfidentScene, EmptyConfidentSet,
                                 PairedPrediction, build_confident_set, collect_score_pools,
                                 consistency_iou, empty_pools, generate_dual_thresholds,
                                 match_gt_to_predictions, thresholds_from_pools)


def box(cx=0.0, cls=0, length=2.0, **kw):
    return Box3D(cx, kw.get("cy", 0.0), 0.5, length, 1.0, 1.0, kw.get("yaw", 0.0), cls)


def det(b, s_cls=0.8, s_obj=0.7):
    return Detection(b, s_cls, s_obj)


def shifted_for_iou(target):
    """Shift along x so that two 2 m boxes overlap with the given IoU."""
    # overlap (2 - d), union (2 + d): iou = (2 - d) / (2 + d)
    return 2.0 * (1.0 - target) / (1.0 + target)


class TestMatching:
    def test_match_above_tau(self):
        g = box()
        p = det(box(cx=shifted_for_iou(0.6)))
        assert iou_3d(g, p.box) == pytest.approx(0.6)
        assert match_gt_to_predictions([g], [p], 0.5) == [(0, 0)]

    def test_no_match_below_tau(self):
        p = det(box(cx=shifted_for_iou(0.3)))
        assert match_gt_to_predictions([box()], [p], 0.5) == []

    def test_crossed_ious_pick_the_argmax(self):
        g = [box(0.0), box(10.0)]
        p = [det(box(shifted_for_iou(0.9))), det(box(10.0 + shifted_for_iou(0.8)))]
        # cross IoUs are zero here; add near misses that lose the argmax
        p += [det(box(shifted_for_iou(0.2))), det(box(10.0 + shifted_for_iou(0.1)))]
        assert match_gt_to_predictions(g, p, 0.5) == [(0, 0), (1, 1)]

    def test_class_must_agree(self):
        assert match_gt_to_predictions([box(cls=1)], [det(box(cls=0))], 0.5) == []

    def test_prediction_can_serve_two_gts(self):
        g = [box(-0.05), box(0.05)]
        assert match_gt_to_predictions(g, [det(box())], 0.5) == [(0, 0), (1, 0)]

    def test_tau_range(self):
        with pytest.raises(ValueError):
            match_gt_to_predictions([], [], 1.0)

    def test_exhaustive_argmax_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            gts = [box(rng.uniform(0, 4), int(rng.integers(2)), cy=rng.uniform(-1, 1))
                   for _ in range(3)]
            preds = [det(box(rng.uniform(0, 4), int(rng.integers(2)), cy=rng.uniform(-1, 1)))
                     for _ in range(4)]
            expected = []
            for j, g in enumerate(gts):
                scores = [iou_3d(g, p.box) if p.class_id == g.class_id else -1.0 for p in preds]
                k = int(np.argmax(scores))
                if scores[k] > 0.5:
                    expected.append((j, k))
            assert match_gt_to_predictions(gts, preds, 0.5) == expected


class TestConsistency:
    def test_identity_transform(self):
        d = det(box(yaw=0.3))
        assert consistency_iou(d, [det(box(yaw=0.3))], RigidTransform()) == pytest.approx(1.0)

    def test_empty_augmented_set(self):
        assert consistency_iou(det(box()), [], RigidTransform()) == 0.0

    @given(st.integers(0, 2**32 - 1))
    def test_round_trip_matches_untransformed(self, seed):
        rng = np.random.default_rng(seed)
        t = sample_weak_transform(rng)
        pred = det(Box3D(*rng.uniform(-10, 10, 3), *rng.uniform(0.5, 4, 3), rng.uniform(-3, 3)))
        others = [Box3D(pred.box.cx + dx, pred.box.cy, pred.box.cz, 3, 1.5, 1.5, 0.2)
                  for dx in rng.uniform(-2, 2, 3)]
        direct = max(iou_3d(pred.box, b) for b in others)
        aug = [det(b) for b in apply_transform_boxes(others, t)]
        assert consistency_iou(pred, aug, t) == pytest.approx(direct, abs=1e-6)


def confident(scene_id, boxes):
    return ConfidentScene(Scene(scene_id, PointCloud(np.zeros((0, 4))), boxes))


class TestPools:
    def test_no_match_leaves_pools_unchanged(self):
        pools = collect_score_pools([confident("a", [box()])],
                                    [PairedPrediction([], [], RigidTransform())], 0.5, [0])
        assert pools == empty_pools([0])

    def test_single_match_adds_its_scores(self):
        g = box()
        pred = Detection(box(cx=0.1), 0.8, 0.7)
        aug = [Detection(box(cx=0.1), 0.5, 0.5)]
        pools = collect_score_pools([confident("a", [g])],
                                    [PairedPrediction([pred], aug, RigidTransform())], 0.5, [0])
        assert pools[0]["cls"] == [0.8] and pools[0]["obj"] == [0.7]
        assert pools[0]["iou"] == [pytest.approx(1.0)]

    def test_pool_size_equals_match_count(self):
        rng = np.random.default_rng(1)
        dc, paired, expected = [], [], 0
        for i in range(10):
            gts = [box(rng.uniform(0, 20), int(rng.integers(2))) for _ in range(3)]
            preds = [det(box(g.cx + rng.normal(0, 0.3), g.class_id)) for g in gts]
            expected += len(match_gt_to_predictions(gts, preds, 0.5))
            dc.append(confident(f"s{i}", gts))
            paired.append(PairedPrediction(preds, preds, RigidTransform()))
        pools = collect_score_pools(dc, paired, 0.5, [0, 1])
        assert sum(len(p["cls"]) for p in pools.values()) == expected
        assert all(len(p["cls"]) == len(p["obj"]) == len(p["iou"]) for p in pools.values())

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            collect_score_pools([confident("a", [])], [], 0.5, [0])


def trimodal(rng, n):
    return np.concatenate([rng.uniform(0.05, 0.15, n), rng.uniform(0.45, 0.55, n),
                           rng.uniform(0.85, 0.95, n)])


class TestThresholds:
    def test_trimodal_pools_give_cluster_edges(self):
        rng = np.random.default_rng(2)
        pools = {0: {m: list(trimodal(rng, 10)) for m in ("cls", "obj", "iou")}}
        th = thresholds_from_pools(pools, [0])
        for m in ("cls", "obj", "iou"):
            low, high = getattr(th[0], m)
            assert 0.15 < low <= 0.55 and 0.55 < high <= 0.95
            assert low == min(v for v in pools[0][m] if v > 0.3)
            assert high == min(v for v in pools[0][m] if v > 0.7)

    def test_absent_class_gets_fallback(self):
        rng = np.random.default_rng(3)
        pools = {0: {m: list(trimodal(rng, 5)) for m in ("cls", "obj", "iou")}}
        th = thresholds_from_pools(pools, [0, 1])
        assert th[1] == ClassThresholds.uniform(0.5, 1.0)
        assert th.pool_sizes == {0: 15, 1: 0}

    def test_classes_are_independent(self):
        rng = np.random.default_rng(4)
        base = {c: {m: list(trimodal(rng, 5)) for m in ("cls", "obj", "iou")} for c in (0, 1)}
        changed = {0: base[0], 1: {m: list(trimodal(rng, 7) * 0.9) for m in base[1]}}
        assert thresholds_from_pools(base, [0, 1])[0] == thresholds_from_pools(changed, [0, 1])[0]

    def test_class_thresholds_validation(self):
        with pytest.raises(ValueError):
            ClassThresholds((0.5, 0.5), (0.1, 0.2), (0.1, 0.2))
        with pytest.raises(ValueError):
            ClassThresholds((0.1, 1.2), (0.1, 0.2), (0.1, 0.2))

    def test_dict_roundtrip(self):
        t = ClassThresholds((0.1, 0.2), (0.3, 0.4), (0.5, 0.6))
        assert ClassThresholds.from_dict(t.as_dict()) == t


def oracle_detector(scene_boxes):
    """Detector that returns fixed boxes, scored by how far they sit from x=0."""
    def detect(points):
        if len(points) == 0:
            return []
        shift = float(points[0, 0])          # the first point is the scene origin marker
        return [Detection(b.replace(cx=b.cx + shift), s_cls=0.5 + 0.4 * math.tanh(b.cx),
                          s_obj=0.9) for b in scene_boxes]
    return detect


class TestGenerate:
    def test_empty_confident_set(self):
        with pytest.raises(EmptyConfidentSet):
            generate_dual_thresholds([], lambda p: [], np.random.default_rng(0), [0])

    def test_deterministic_under_seed(self):
        gts = [box(float(i), 0, cy=3.0 * i) for i in range(6)]
        pts = np.zeros((1, 4))
        dc = [ConfidentScene(Scene(f"s{i}", PointCloud(pts), gts)) for i in range(4)]
        det_fn = oracle_detector(gts)
        a = generate_dual_thresholds(dc, det_fn, np.random.default_rng(9), [0, 1])
        b = generate_dual_thresholds(list(reversed(dc)), det_fn, np.random.default_rng(9), [0, 1])
        assert a == b
        assert a.pool_sizes[0] == 24 and a.pool_sizes[1] == 0
        for c in (0, 1):
            for m in ("cls", "obj", "iou"):
                low, high = getattr(a[c], m)
                assert low < high

    def test_confident_set_rebuild(self):
        lab = Scene("L0", PointCloud(np.zeros((0, 4))), [box()])
        u1 = Scene("U1", PointCloud(np.zeros((0, 4))))
        u0 = Scene("U0", PointCloud(np.zeros((0, 4))))
        dc = build_confident_set([lab], {"U1": (u1, [box(3.0)]), "U0": (u0, [])})
        assert [c.scene_id for c in dc] == ["L0", "U1"]
        assert [c.provenance for c in dc] == ["ground-truth", "mined"]
        assert dc[1].labels == [box(3.0)]
