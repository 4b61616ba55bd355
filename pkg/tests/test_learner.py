import numpy as np
import pytest
from hypothesis import given, strategies as st

from hssda import learner
from hssda.detector import ParamLayout, extract_proposals, init_params, run_head
from hssda.geom3d import Box3D, Detection, PointCloud
from hssda.learner import (Adam, DimMismatch, MutualState, NoLabeledData, TrainConfig,
                           batch_loss, burn_in, compute_loss, ema_update, labeled_view,
                           mutual_learning_epoch, scene_loss, train_step)
from hssda.metrics import evaluate_ap
from hssda.supervision import TrainingView, partition_predictions
from hssda.synth import SynthParams, generate_dataset, sample_box_surface
from hssda.threshold_gen import thresholds_from_pools

REGION = (0.0, 40.0, -20.0, 20.0)
EASY = SynthParams(n_labeled=16, n_unlabeled=12, n_test=16, distractors_per_scene=(0, 1),
                   clutter_density=0.5)


@pytest.fixture(scope="module")
def easy():
    return generate_dataset(EASY, np.random.default_rng(11))


@pytest.fixture(scope="module")
def burned(easy):
    cfg = TrainConfig(region=REGION, burn_in_epochs=12, seed=3)
    hist = []
    return burn_in(easy.labeled, cfg, hist), hist, cfg


class TestEma:
    def test_arithmetic(self):
        assert ema_update(np.array([2.0]), np.array([1.0]), 0.9)[0] == pytest.approx(1.9)

    def test_alpha_one_freezes_teacher(self):
        t = np.array([1.0, -2.0])
        np.testing.assert_array_equal(ema_update(t, np.array([5.0, 5.0]), 1.0), t)

    def test_dimension_mismatch(self):
        with pytest.raises(DimMismatch):
            ema_update(np.zeros(3), np.zeros(4), 0.9)

    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=20),
           st.floats(0.0, 1.0, exclude_min=True))
    def test_convex_combination(self, pairs, alpha):
        t, s = np.array(pairs).T
        out = ema_update(t, s, alpha)
        tol = 1e-9 * (1 + np.abs(t) + np.abs(s))
        assert np.all(out >= np.minimum(t, s) - tol) and np.all(out <= np.maximum(t, s) + tol)

    def test_geometric_convergence(self):
        s = np.array([1.0, -3.0])
        t = np.array([4.0, 2.0])
        for _ in range(50):
            nxt = ema_update(t, s, 0.95)
            assert np.linalg.norm(nxt - s) / np.linalg.norm(t - s) == pytest.approx(0.95, abs=1e-9)
            t = nxt


def object_view(labeled=True, weighted=False, seed=0):
    rng = np.random.default_rng(seed)
    box = Box3D(10.0, 0.0, 0.75, 4.0, 1.7, 1.5, 0.2, 0)
    pts = np.column_stack([sample_box_surface(box, 300, rng, 0.02), rng.random(300)])
    strong, soft = ([], [(box, 0.4)]) if weighted else ([box], [])
    return TrainingView("v", PointCloud(pts), strong, soft, labeled=labeled), box


class TestLoss:
    def test_nothing_gives_zero(self):
        view = TrainingView("e", PointCloud(np.zeros((0, 4))))
        theta = init_params(3)
        assert compute_loss([view], [extract_proposals(view.points.data, theta)], theta, 3) \
            == (0.0, 0.0, 0.0)

    def test_perfect_prediction_limit(self):
        view, box = object_view()
        lay = ParamLayout(3)
        theta = init_params(3)
        props = extract_proposals(view.points.data, theta)
        # put the proposal exactly on the label and push its logits up
        props.boxes[0] = box
        cls = int(run_head(props, theta, 3).classes[0])
        losses = []
        for big in (5.0, 10.0, 20.0):
            th = theta.copy()
            lay.cls(th, cls)[0] = big
            lay.obj(th)[0] = big
            lay.refine(th)[cls][:, 0] = np.log(box.size) - 0.5 * props.log_size[0]
            lay.refine(th)[cls][:, 1:] = 0.0
            losses.append(scene_loss(props, [box], [], th, 3))
        assert losses[0] > losses[1] > losses[2]
        assert losses[2] < 1e-8

    def test_zero_weight_contributes_nothing(self):
        view, box = object_view(labeled=False)
        theta = init_params(3)
        props = extract_proposals(view.points.data, theta)
        assert len(props) == 1
        assert scene_loss(props, [], [(box, 0.0)], theta, 3) == 0.0
        assert scene_loss(props, [], [(box, 0.5)], theta, 3) > 0.0

    def test_weight_scales_matched_terms_linearly(self):
        view, box = object_view(labeled=False)
        theta = init_params(3)
        props = extract_proposals(view.points.data, theta)
        base = scene_loss(props, [], [(box, 0.0)], theta, 3)
        parts = [scene_loss(props, [], [(box, w)], theta, 3) - base for w in (0.2, 0.4, 0.8)]
        assert parts[1] == pytest.approx(2 * parts[0], rel=1e-12)
        assert parts[2] == pytest.approx(4 * parts[0], rel=1e-12)

    def test_decomposition(self, easy):
        theta = init_params(3, easy.labeled)
        lab = [labeled_view(s) for s in easy.labeled[:3]]
        unl = [object_view(labeled=False, weighted=True, seed=i)[0] for i in range(2)]
        views = lab + unl
        preds = [extract_proposals(v.points.data, theta) for v in views]
        ls, lu, total = compute_loss(views, preds, theta, 3)
        assert total == ls + lu and lu > 0
        assert compute_loss(lab, preds[:3], theta, 3) == (ls, 0.0, ls)


class TestTrainStep:
    def test_zero_loss_batch_is_unchanged(self):
        empty = TrainingView("e", PointCloud(np.zeros((0, 4))))
        theta = init_params(3)
        np.testing.assert_array_equal(train_step(theta, [empty], 0.1, 3), theta)

    def test_small_step_lowers_loss(self, easy):
        theta = init_params(3, easy.labeled)
        batch = [labeled_view(s) for s in easy.labeled[:4]]
        before = batch_loss(theta, batch, 3)
        after = batch_loss(train_step(theta, batch, 1e-4, 3), batch, 3)
        assert after < before

    def test_lr_must_be_positive(self):
        with pytest.raises(ValueError):
            train_step(init_params(3), [], 0.0, 3)

    def test_adam_first_step_size(self):
        opt = Adam(0.1)
        out = opt.step(np.zeros(3), np.array([2.0, -0.5, 0.0]))
        np.testing.assert_allclose(out, [-0.1, 0.1, 0.0], atol=1e-6)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(tau_pair=1.0), dict(lr=0.0),
                                    dict(ema_cadence="batch"), dict(iou_mode="2d"),
                                    dict(region=(1, 0, 0, 1)), dict(rows=0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.alpha, cfg.ema_cadence, cfg.tau_pair, cfg.rows, cfg.cols) == \
            (0.999, "epoch", 0.5, 2, 2)


class TestBurnIn:
    def test_needs_labels(self):
        with pytest.raises(NoLabeledData):
            burn_in([], TrainConfig(region=REGION))

    def test_reaches_useful_ap(self, easy, burned):
        theta, _, _ = burned
        preds = [learner.toy_detect(s.points.data, theta, 3) for s in easy.test]
        ap = evaluate_ap(preds, [s.labels for s in easy.test], 0.5, [0, 1, 2])
        assert min(ap.values()) >= 0.8, ap

    def test_loss_trend(self, easy):
        # the per-epoch training loss moves with the pasted objects, so the
        # curve is measured on the plain labeled scenes after each epoch
        views = [labeled_view(s) for s in easy.labeled]
        theta0 = init_params(3, easy.labeled)
        curve = [batch_loss(theta0, views, 3)]
        hist = []
        burn_in(easy.labeled, TrainConfig(region=REGION, burn_in_epochs=12, lr=0.02, seed=3),
                hist, on_epoch=lambda e, th: curve.append(batch_loss(th, views, 3)))
        assert len(hist) == 12 and len(curve) == 13
        for a, b in zip(curve, curve[1:]):
            assert b <= a * 1.05
        assert curve[-1] < 0.5 * curve[0]

    def test_deterministic(self, easy, burned):
        theta, _, cfg = burned
        np.testing.assert_array_equal(burn_in(easy.labeled, cfg), theta)


def unlabeled(ds):
    return [s.with_labels([]) for s in ds.unlabeled]


class TestMutualLearning:
    def test_start_copies_parameters(self, easy, burned):
        theta, _, cfg = burned
        st_ = MutualState.start(theta, easy.labeled, unlabeled(easy), cfg)
        np.testing.assert_array_equal(st_.teacher, st_.student)
        st_.student[0] += 1.0
        assert st_.teacher[0] != st_.student[0]

    def test_epoch_runs_and_is_deterministic(self, easy, burned):
        theta, _, cfg = burned
        runs = []
        for _ in range(2):
            st_ = MutualState.start(theta, easy.labeled, unlabeled(easy), cfg)
            st_ = mutual_learning_epoch(mutual_learning_epoch(st_))
            runs.append(st_)
        a, b = runs
        assert a.epoch == 2 and a.thresholds.epoch == 2
        assert a.thresholds == b.thresholds
        np.testing.assert_array_equal(a.teacher, b.teacher)
        assert set(a.labels) == {s.scene_id for s in easy.unlabeled}
        for c in range(3):
            for m in ("cls", "obj", "iou"):
                low, high = getattr(a.thresholds[c], m)
                assert low < high

    def test_epoch_cadence_applies_one_update(self, easy, burned):
        theta, _, cfg = burned
        st_ = MutualState.start(theta, easy.labeled, unlabeled(easy), cfg)
        out = mutual_learning_epoch(st_)
        np.testing.assert_allclose(out.teacher, ema_update(theta, out.student, cfg.alpha),
                                   rtol=0, atol=1e-15)

    def test_step_cadence_follows_every_step(self, easy, burned):
        import dataclasses
        theta, _, cfg = burned
        cfg = dataclasses.replace(cfg, ema_cadence="step", alpha=0.9)
        seen = []
        st_ = MutualState.start(theta, easy.labeled, unlabeled(easy), cfg)
        out = mutual_learning_epoch(st_, step_hook=lambda th: seen.append(th.copy()))
        expected = theta
        for th in seen:
            expected = ema_update(expected, th, 0.9)
        n_views = len(easy.labeled) + len(easy.unlabeled)
        assert len(seen) == -(-n_views // cfg.batch_size)
        np.testing.assert_array_equal(out.teacher, expected)

    def test_silent_teacher_yields_no_pseudo_labels(self, easy, burned):
        theta, _, cfg = burned
        lay = ParamLayout(3)
        mute = theta.copy()
        for c in range(3):
            lay.cls(mute, c)[0] = -40.0
        st_ = mutual_learning_epoch(MutualState.start(mute, easy.labeled, unlabeled(easy), cfg))
        assert all(len(h.high) == 0 and len(h.ambiguous) == 0 for h in st_.labels.values())
        assert st_.mined and all(not boxes for _, boxes in st_.mined.values())

    def test_zero_scores_fall_to_low(self):
        th = thresholds_from_pools({}, [0])
        d = Detection(Box3D(0, 0, 0, 1, 1, 1), 0.0, 0.0, 0.0)
        out = partition_predictions([d], th)
        assert out.low == [d] and not out.high and not out.ambiguous

    def test_perfect_scores_are_kept_at_full_weight(self):
        # a pool of perfect scores falls back to (0.5, 1.0); strict comparisons
        # then place perfect detections in the ambiguous level with weight 1
        pools = {0: {m: [1.0] * 20 for m in ("cls", "obj", "iou")}}
        th = thresholds_from_pools(pools, [0])
        dets = [Detection(Box3D(3.0 * i, 0, 0, 1, 1, 1), 1.0, 1.0, 1.0) for i in range(5)]
        out = partition_predictions(dets, th)
        assert not out.low and not out.high
        assert [w for _, w in out.ambiguous] == [1.0] * 5

    def test_no_unlabeled_ground_truth_reaches_training(self, easy, burned, monkeypatch):
        theta, _, cfg = burned
        leaked = []
        orig = learner.build_training_view

        def spy(scene, labels, gt=None):
            leaked.append(bool(scene.labels) or gt is not None)
            return orig(scene, labels, gt)
        monkeypatch.setattr(learner, "build_training_view", spy)
        mutual_learning_epoch(MutualState.start(theta, easy.labeled, unlabeled(easy), cfg))
        assert leaked and not any(leaked)
