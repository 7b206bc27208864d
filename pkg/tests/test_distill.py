"""Distillation losses: target composition, the gated MSE and its identity,
the reference baselines, and the online update step."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenedistill.detection import (
    Box,
    Detection,
    GridShape,
    GroundTruthObject,
    decode_tensor,
    encode_object,
    partition_cells,
    sigmoid,
)
from scenedistill.distill import (
    DistillConfig,
    bounded_distill_loss,
    bounded_loss_grad,
    compose_target,
    distill_step,
    general_distill_loss,
    nms_distill_loss,
)
from scenedistill.models import (
    DecoderParams,
    FeatureFrame,
    decoder_forward,
    init_decoder,
)

GRID = GridShape(s=4, c=3)


def random_pair(seed, spread=2.0):
    rng = np.random.default_rng(seed)
    student = rng.normal(0, spread, size=(GRID.s, GRID.s, GRID.channels))
    oracle = rng.normal(0, spread, size=(GRID.s, GRID.s, GRID.channels))
    return student, oracle


class TestComposeTarget:
    def test_lam_zero_target_is_oracle(self):
        student, oracle = random_pair(0)
        target = compose_target(student, oracle, DistillConfig(lam=0.0))
        assert np.allclose(target, oracle)

    def test_lam_one_blends_to_student_on_low_cells(self):
        student, oracle = random_pair(1)
        cfg = DistillConfig(lam=1.0)
        target = compose_target(student, oracle, cfg)
        high, low = partition_cells(oracle, cfg.gate)
        assert np.allclose(target[high], oracle[high])
        assert np.allclose(target[low], student[low])

    def test_matches_elementwise_loop(self):
        student, oracle = random_pair(2)
        cfg = DistillConfig(lam=0.4)  # the operating point used throughout
        target = compose_target(student, oracle, cfg)
        for r in range(GRID.s):
            for c in range(GRID.s):
                high = 1.0 / (1.0 + np.exp(-oracle[r, c, 0])) >= cfg.gate
                for ch in range(GRID.channels):
                    if high:
                        want = oracle[r, c, ch]
                    else:
                        want = 0.4 * student[r, c, ch] + 0.6 * oracle[r, c, ch]
                    assert target[r, c, ch] == pytest.approx(want)

    def test_shape_mismatch_raises(self):
        student, oracle = random_pair(3)
        with pytest.raises(ValueError):
            compose_target(student[:2], oracle, DistillConfig())

    def test_no_aliasing_with_inputs(self):
        student, oracle = random_pair(4)
        target = compose_target(student, oracle, DistillConfig(lam=0.5))
        target += 1.0
        assert not np.shares_memory(target, oracle)


class TestBoundedLoss:
    def test_zero_when_equal(self):
        _, oracle = random_pair(0)
        assert bounded_distill_loss(oracle.copy(), oracle, DistillConfig(lam=0.4)) == 0.0

    def test_lam_zero_is_two_masked_mses(self):
        student, oracle = random_pair(1)
        cfg = DistillConfig(lam=0.0)
        high, low = partition_cells(oracle, cfg.gate)
        want = 0.0
        if high.any():
            want += np.mean((student[high] - oracle[high]) ** 2)
        if low.any():
            want += np.mean((student[low] - oracle[low]) ** 2)
        assert bounded_distill_loss(student, oracle, cfg) == pytest.approx(want)

    def test_two_cell_hand_case(self):
        # one confident cell off by 1 everywhere, one background cell off by 1:
        # confident term = 1, background term = (1 - 0.4)^2 = 0.36
        shape = GridShape(s=1, c=1)
        oracle = np.zeros((1, 2, shape.channels))  # 1x2 grid: one cell per partition
        oracle[0, 0, 0] = 10.0
        oracle[0, 1, 0] = -10.0
        student = oracle + 1.0
        cfg = DistillConfig(lam=0.4)
        high, low = partition_cells(oracle, cfg.gate)
        assert high.sum() == 1 and low.sum() == 1
        loss = bounded_distill_loss(student, oracle, cfg)
        assert loss == pytest.approx(1.0 + 0.36)

    @pytest.mark.parametrize("seed", range(10))
    def test_low_term_identity(self, seed):
        # mean over low cells of (s - blended-target)^2 == (1-lam)^2 * MSE_low
        student, oracle = random_pair(seed)
        lam = float(np.random.default_rng(seed).uniform(0, 1))
        cfg = DistillConfig(lam=lam)
        high, low = partition_cells(oracle, cfg.gate)
        target = compose_target(student, oracle, cfg)
        direct = np.mean((student[low] - target[low]) ** 2) if low.any() else 0.0
        identity = (1 - lam) ** 2 * (np.mean((student[low] - oracle[low]) ** 2) if low.any() else 0.0)
        assert abs(direct - identity) < 1e-10

    @given(seed=st.integers(0, 10_000), lam=st.floats(0, 1))
    @settings(max_examples=60)
    def test_nonnegative(self, seed, lam):
        student, oracle = random_pair(seed)
        assert bounded_distill_loss(student, oracle, DistillConfig(lam=lam)) >= 0.0

    def test_invariant_to_partition_preserving_permutation(self):
        student, oracle = random_pair(5)
        cfg = DistillConfig(lam=0.3)
        perm = np.random.default_rng(5).permutation(GRID.s)
        # permuting rows moves student and oracle cells together, so the
        # partition moves with them and the loss cannot change
        assert bounded_distill_loss(student[perm], oracle[perm], cfg) == pytest.approx(
            bounded_distill_loss(student, oracle, cfg))

    def test_all_high_or_all_low_edges(self):
        student, oracle = random_pair(6)
        oracle[:, :, 0] = 10.0
        cfg = DistillConfig(lam=0.4)
        want = np.mean((student - oracle) ** 2)
        assert bounded_distill_loss(student, oracle, cfg) == pytest.approx(want)
        oracle[:, :, 0] = -10.0
        want = 0.36 * np.mean((student - oracle) ** 2)
        assert bounded_distill_loss(student, oracle, cfg) == pytest.approx(want)


class TestBoundedLossGrad:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences_through_tensor(self, seed):
        student, oracle = random_pair(seed, spread=1.0)
        cfg = DistillConfig(lam=0.4)
        grad = bounded_loss_grad(student, oracle, cfg)
        eps = 1e-5
        rng = np.random.default_rng(seed)
        for _ in range(20):
            r, c, ch = (rng.integers(GRID.s), rng.integers(GRID.s), rng.integers(GRID.channels))
            plus, minus = student.copy(), student.copy()
            plus[r, c, ch] += eps
            minus[r, c, ch] -= eps
            numeric = (bounded_distill_loss(plus, oracle, cfg)
                       - bounded_distill_loss(minus, oracle, cfg)) / (2 * eps)
            denom = max(abs(numeric), 1e-6)
            assert abs(grad[r, c, ch] - numeric) / denom < 1e-4


def make_det(cx, cy, w, h, class_id, conf):
    return Detection(Box(cx, cy, w, h), class_id, conf)


def make_gt(cx, cy, w, h, class_id, oid=0):
    return GroundTruthObject(Box(cx, cy, w, h), class_id, oid)


class TestGeneralDistillLoss:
    def test_beta_one_ignores_oracle(self):
        dets = [make_det(0.5, 0.5, 0.2, 0.2, 0, 0.9)]
        gt = [make_gt(0.5, 0.5, 0.2, 0.2, 0)]
        far = [make_det(0.1, 0.1, 0.05, 0.05, 1, 0.8)]
        with_oracle = general_distill_loss(dets, gt, far, beta=1.0)
        without = general_distill_loss(dets, gt, [], beta=1.0)
        assert with_oracle == pytest.approx(without)

    def test_beta_zero_ignores_gt(self):
        dets = [make_det(0.5, 0.5, 0.2, 0.2, 0, 0.9)]
        oracle = [make_det(0.5, 0.5, 0.2, 0.2, 0, 0.95)]
        a = general_distill_loss(dets, [], oracle, beta=0.0)
        b = general_distill_loss(dets, [make_gt(0.2, 0.2, 0.1, 0.1, 1)], oracle, beta=0.0)
        assert a == pytest.approx(b)

    def test_two_detection_case_matches_hand_matching(self):
        # det0 matches gt0 (same box, same class); det1 is unmatched
        dets = [make_det(0.5, 0.5, 0.2, 0.2, 0, 0.8),
                make_det(0.1, 0.8, 0.1, 0.1, 1, 0.4)]
        gt = [make_gt(0.5, 0.5, 0.2, 0.2, 0)]
        # L_gt: matched pair (conf-1)^2 + box 0 + cls 0 -> 0.04; unmatched det 0.4^2
        want_gt = ((0.8 - 1.0) ** 2 + 0.4 ** 2) / 2
        got = general_distill_loss(dets, gt, [], beta=1.0)
        # empty teacher list: L_t over the same dets, both unmatched
        want_t = (0.8 ** 2 + 0.4 ** 2) / 2
        assert got == pytest.approx(1.0 * want_gt + 0.0 * want_t)
        got_half = general_distill_loss(dets, gt, [], beta=0.5)
        assert got_half == pytest.approx(0.5 * want_gt + 0.5 * want_t)


class TestNmsDistillLoss:
    def test_near_zero_when_student_equals_saturated_oracle(self):
        shape = GridShape(s=4, c=3)
        oracle = np.zeros((4, 4, shape.channels))
        oracle[:, :, 0] = -12.0
        gt = [make_gt(0.3, 0.3, 0.2, 0.2, 1), make_gt(0.72, 0.67, 0.15, 0.2, 2, 1)]
        for obj in gt:
            encode_object(oracle, shape, obj.box, obj.class_id, obj_logit=12.0, class_margin=12.0)
        student = oracle.copy()
        loss = nms_distill_loss(student, oracle, gt, shape)
        assert loss == pytest.approx(0.0, abs=1e-3)

    def test_empty_gt_and_oracle_penalizes_spurious_objectness(self):
        shape = GridShape(s=3, c=2)
        oracle = np.zeros((3, 3, shape.channels))
        oracle[:, :, 0] = -12.0
        student = oracle.copy()
        encode_object(student, shape, Box(0.5, 0.5, 0.2, 0.2), 0, obj_logit=6.0)
        loss = nms_distill_loss(student, oracle, [], shape)
        conf = sigmoid(6.0) * float(np.max([sigmoid(0.0)]))  # class prob ~ saturated
        dets = decode_tensor(student, shape, 0.5)
        assert len(dets) == 1
        # detection is unmatched against both empty lists: conf^2 in each term
        assert loss == pytest.approx(2 * dets[0].confidence ** 2)

    def test_more_targets_cost_more(self):
        # sanity check of the scaling direction; the real benchmark lives in
        # the evaluation module
        import time
        shape = GridShape(s=8, c=4)
        rng = np.random.default_rng(0)

        def build(n):
            cells = rng.choice(64, size=n, replace=False)
            gt = []
            t = np.zeros((8, 8, shape.channels))
            t[:, :, 0] = -12.0
            for i, cell in enumerate(cells):
                r, c = divmod(int(cell), 8)
                box = Box((c + 0.5) / 8, (r + 0.5) / 8, 0.1, 0.1)
                gt.append(make_gt(box.cx, box.cy, 0.1, 0.1, int(rng.integers(4)), i))
                encode_object(t, shape, box, gt[-1].class_id, obj_logit=8.0)
            return t, gt

        t1, gt1 = build(2)
        t50, gt50 = build(50)

        def timed(t, gt, reps=20):
            best = []
            for _ in range(reps):
                t0 = time.perf_counter()
                nms_distill_loss(t + 0.01, t, gt, shape)
                best.append(time.perf_counter() - t0)
            return np.median(best)

        timed(t1, gt1, reps=2)  # warm-up
        assert timed(t50, gt50) > timed(t1, gt1)


class TestDistillStep:
    GRID1 = GridShape(s=2, c=2)

    def _setup(self, seed=0):
        rng = np.random.default_rng(seed)
        params = init_decoder(4, 6, self.GRID1, seed=seed)
        feat = FeatureFrame(frame_id=0, values=rng.normal(0, 1, size=(2, 2, 4)))
        oracle = rng.normal(0, 1, size=(2, 2, self.GRID1.channels))
        return params, feat, oracle

    def test_student_equal_oracle_no_change(self):
        params, feat, _ = self._setup()
        oracle = decoder_forward(params, feat)
        cfg = DistillConfig(lam=0.4, lr=0.01, steps_per_event=5)
        new_params, fb = distill_step(params, feat, oracle, cfg)
        assert fb.loss_before == 0.0
        assert fb.delta_l == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(new_params.w1, params.w1)
        assert new_params.version == params.version + cfg.steps_per_event

    def test_loss_decreases_on_seeded_trials(self):
        cfg = DistillConfig(lam=0.4, lr=1e-2, steps_per_event=25)
        wins = 0
        for seed in range(100):
            params, feat, _ = self._setup(seed)
            rng = np.random.default_rng(1000 + seed)
            oracle = np.zeros((2, 2, self.GRID1.channels))
            oracle[:, :, 0] = rng.choice([-6.0, 4.0], size=(2, 2))
            oracle[:, :, 1:] = rng.normal(0, 2, size=(2, 2, self.GRID1.channels - 1))
            _, fb = distill_step(params, feat, oracle, cfg)
            wins += fb.loss_after < fb.loss_before
        assert wins >= 95

    def test_scalar_head_matches_closed_form_descent(self):
        # zero first layer: only b2 moves, each channel descends independently
        shape = GridShape(s=1, c=1)
        params = DecoderParams(
            w1=np.zeros((1, 1)), b1=np.zeros(1),
            w2=np.zeros((1, shape.channels)), b2=np.zeros(shape.channels),
        )
        feat = FeatureFrame(frame_id=0, values=np.ones((1, 1, 1)))
        oracle = np.full((1, 1, shape.channels), 2.0)  # one confident cell
        lr, n = 0.1, shape.channels
        cfg = DistillConfig(lam=0.4, lr=lr, steps_per_event=3)
        b = np.zeros(shape.channels)
        for _ in range(3):
            b = b - lr * 2.0 * (b - 2.0) / n
        new_params, fb = distill_step(params, feat, oracle, cfg)
        assert np.allclose(new_params.b2, b)
        assert np.allclose(new_params.w2, 0.0)
        assert fb.loss_before == pytest.approx(4.0)

    def test_non_finite_oracle_aborts_with_record(self):
        params, feat, oracle = self._setup()
        oracle[0, 0, 0] = np.nan
        new_params, fb = distill_step(params, feat, oracle, DistillConfig())
        assert fb.error is not None
        assert new_params is params

    def test_gradient_through_params_matches_finite_differences(self):
        params, feat, oracle = self._setup(3)
        cfg = DistillConfig(lam=0.4)
        from scenedistill.distill import bounded_loss_grad
        from scenedistill.models import decoder_grad
        out = decoder_forward(params, feat)
        analytic = decoder_grad(params, feat, bounded_loss_grad(out, oracle, cfg))
        eps = 1e-5
        for name in ("w1", "b1", "w2", "b2"):
            base = getattr(params, name)
            num = np.zeros_like(base)
            it = np.nditer(base, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                for sign in (+1, -1):
                    pert = base.copy()
                    pert[idx] += sign * eps
                    p2 = DecoderParams(**{**{k: getattr(params, k)
                                             for k in ("w1", "b1", "w2", "b2")}, name: pert})
                    val = bounded_distill_loss(decoder_forward(p2, feat), oracle, cfg)
                    num[idx] += sign * val
                num[idx] /= 2 * eps
            a = getattr(analytic, name)
            denom = np.maximum(np.abs(num), 1e-6)
            assert np.max(np.abs(a - num) / denom) < 1e-4, name


class TestDistillConfig:
    @pytest.mark.parametrize("kwargs", [
        {"lam": -0.1}, {"lam": 1.1}, {"gate": 0.0}, {"gate": 1.0},
        {"beta": 2.0}, {"lr": 0.0}, {"steps_per_event": 0},
    ])
    def test_rejects_out_of_range(self, kwargs):
        with pytest.raises(ValueError):
            DistillConfig(**kwargs)
