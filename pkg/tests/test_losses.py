import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sepitch import autodiff as ad
from sepitch.losses import (Case, LossReport, NaiveDwhsConfig, NoVoicedFramesError,
                            classify_case, dwhs_case_loss, dwhs_loss, frame_correct, loss_mss,
                            loss_pe, naive_dwhs_weights, pitch_agreement, total_loss_stage1,
                            total_loss_stage2)
from sepitch.pitch import PitchTrack


def value(t):
    return float(np.asarray(t.data if isinstance(t, ad.Tensor) else t))


def logsig(x):
    return -math.log1p(math.exp(-x))


class TestTaskLosses:
    def test_mss_examples(self, rng):
        s = rng.normal(size=100)
        assert value(loss_mss(s, s)) == 0.0
        assert value(loss_mss(np.array([1.0, 2.0]), np.zeros(2))) == 1.5
        e = rng.normal(size=100)
        assert value(loss_mss(3 * s, 3 * e)) == pytest.approx(3 * value(loss_mss(s, e)))
        with pytest.raises(ad.ShapeError):
            loss_mss(s, s[:50])

    def test_mss_gate_is_masked_mean(self, rng):
        s, e = rng.normal(size=(2, 10)), rng.normal(size=(2, 10))
        g = np.zeros((2, 10))
        g[0, :4] = 1
        got = loss_mss(s, e, g).data
        assert got[0] == pytest.approx(np.abs(s[0, :4] - e[0, :4]).mean())
        assert got[1] == 0.0

    def test_pe_uniform_half(self):
        y = np.zeros((4, 360))
        y[:, 7] = 1
        assert value(loss_pe(y, np.full((4, 360), 0.5))) == pytest.approx(360 * math.log(2))
        assert value(loss_pe(y, np.full((4, 360), 0.5))) == pytest.approx(249.53, abs=5e-3)

    def test_pe_exact_prediction_near_zero(self):
        y = np.zeros((5, 360))
        y[[0, 2], [3, 100]] = 1
        assert 0 <= value(loss_pe(y, y)) < 1e-4

    def test_pe_minimised_at_labels(self, rng):
        y = (rng.random((3, 20)) < 0.2).astype(float)
        base = value(loss_pe(y, y))
        for _ in range(3):
            assert value(loss_pe(y, rng.random((3, 20)))) > base

    def test_pe_frame_gate(self, rng):
        y = np.zeros((6, 10))
        y[:, 2] = 1
        a = rng.random((6, 10))
        g = np.array([1, 1, 1, 0, 0, 0], float)
        assert value(loss_pe(y, a, g)) == pytest.approx(value(loss_pe(y[:3], a[:3])))
        with pytest.raises(ad.ShapeError):
            loss_pe(y, a[:5])


def track(*f0):
    return PitchTrack.from_f0(list(f0))


class TestClassifyCase:
    GT = track(0, 220, 220, 220, 330)
    GOOD = track(0, 221, 219, 220, 331)
    BAD = track(0, 300, 300, 0, 500)

    @pytest.mark.parametrize("pred,tgt,case", [("GOOD", "GOOD", Case.CASE1),
                                               ("GOOD", "BAD", Case.CASE2),
                                               ("BAD", "GOOD", Case.CASE3),
                                               ("BAD", "BAD", Case.CASE4)])
    def test_truth_table(self, pred, tgt, case):
        assert classify_case(getattr(self, pred), getattr(self, tgt), self.GT) == case

    def test_frame_correct_rules(self):
        gt = track(0, 0, 200, 200, 200)
        est = track(0, 150, 0, 200 * 2 ** (49 / 1200), 200 * 2 ** (51 / 1200))
        np.testing.assert_array_equal(frame_correct(est, gt), [True, False, False, True, False])

    def test_tau_threshold(self):
        gt = track(200, 200, 200, 200)
        half = track(200, 200, 400, 400)
        assert classify_case(half, half, gt, tau=0.5) == Case.CASE1
        assert classify_case(half, half, gt, tau=0.75) == Case.CASE4

    def test_frame_mask_and_errors(self):
        gt = track(200, 200, 200, 200)
        est = track(200, 400, 400, 400)
        assert classify_case(est, gt, gt, frame_mask=[1, 0, 0, 0]) == Case.CASE1
        with pytest.raises(NoVoicedFramesError):
            classify_case(track(0, 0), track(0, 0), track(0, 0))
        with pytest.raises(ad.ShapeError):
            classify_case(track(1, 1), track(1), track(1, 1))


class TestDwhsCaseLoss:
    def test_examples(self):
        assert value(dwhs_case_loss(Case.CASE1, 1.0, 1.0)) == 0.0
        assert value(dwhs_case_loss(Case.CASE3, 1.0, 1.0)) == pytest.approx(math.log(2), abs=1e-6)
        assert value(dwhs_case_loss(Case.CASE3, 1.0, 1.0)) == pytest.approx(0.693147, abs=1e-6)
        assert value(dwhs_case_loss(Case.CASE2, 1.0, 0.5)) == pytest.approx(0.474077, abs=1e-6)

    @given(st.floats(0.01, 1.99), st.floats(0.01, 1.99))
    def test_closed_forms(self, wm, wp):
        got = [value(dwhs_case_loss(c, wm, wp)) for c in Case]
        want = [abs(wm - 1) + abs(wp - 1),
                abs(wm - 1) - logsig(1 - wp),
                -logsig(wm - 1) + abs(wp - 1),
                abs(wm - 1) - logsig(wp - 1)]
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_minimiser_scans(self):
        w = np.linspace(0.01, 1.99, 199)
        grid_loss = np.array([[value(dwhs_case_loss(Case.CASE1, a, b)) for b in w] for a in w])
        i, j = np.unravel_index(np.argmin(grid_loss), grid_loss.shape)
        assert (w[i], w[j]) == pytest.approx((1.0, 1.0))
        assert np.sum(grid_loss == grid_loss.min()) == 1
        c2 = [value(dwhs_case_loss(Case.CASE2, 1.0, b)) for b in w]
        c3 = [value(dwhs_case_loss(Case.CASE3, a, 1.0)) for a in w]
        c4 = [value(dwhs_case_loss(Case.CASE4, 1.0, b)) for b in w]
        assert np.all(np.diff(c2) > 0)      # decreasing as w_pe -> 0
        assert np.all(np.diff(c3) < 0)      # decreasing toward w_max
        assert np.all(np.diff(c4) < 0)


class TestDwhsLoss:
    def test_sum_of_case_means(self, rng):
        omega = rng.uniform(0.1, 1.9, size=(5, 2))
        cases = [Case.CASE1, Case.CASE3, Case.CASE3, None, Case.CASE4]
        total, parts = dwhs_loss(cases, omega)
        want3 = np.mean([value(dwhs_case_loss(Case.CASE3, *omega[i])) for i in (1, 2)])
        assert value(parts[3]) == pytest.approx(want3)
        assert value(parts[2]) == 0.0
        assert value(total) == pytest.approx(sum(value(p) for p in parts.values()))

    def test_empty_cases_exact_zero_and_no_grad(self):
        omega = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        total, parts = dwhs_loss([None, None], omega)
        assert value(total) == 0.0 and all(value(p) == 0.0 for p in parts.values())

    def test_shape_error(self):
        with pytest.raises(ad.ShapeError):
            dwhs_loss([Case.CASE1], np.ones((2, 2)))

    def test_report_record(self):
        rep = LossReport(1.0, 2.0, {1: 0.5}, 0.5, 3.5, cases=[Case.CASE1, None, Case.CASE1])
        rec = rep.to_record()
        assert rec["case_hist"] == {"1": 2, "2": 0, "3": 0, "4": 0, "excluded": 1}
        assert rec["l_dwhs_1"] == 0.5 and rec["l_dwhs_4"] == 0.0


class TestTotals:
    def test_stage1_unit_weights_is_naive(self, rng):
        lm, lp = rng.random(4), rng.random(4)
        assert value(total_loss_stage1(lm, lp, np.ones((4, 2)))) == pytest.approx(np.mean(lm + lp))
        assert value(total_loss_stage1(lm, lp, np.tile([2.0, 0.0], (4, 1)))) == \
            pytest.approx(np.mean(2 * lm))

    def test_stage1_mixed_batch_mean(self, rng):
        lm, lp, w = rng.random(3), rng.random(3), rng.uniform(0, 2, (3, 2))
        got = value(total_loss_stage1(lm, lp, w, 0.25))
        assert got == pytest.approx(np.mean(w[:, 0] * lm + w[:, 1] * lp) + 0.25)

    def test_omega_is_constant_in_task_terms(self, rng):
        omega = ad.Tensor(rng.uniform(0.5, 1.5, (3, 2)), requires_grad=True)
        lm = ad.Tensor(rng.random(3), requires_grad=True)
        total_loss_stage1(lm, rng.random(3), omega).backward()
        assert omega.grad is None or np.all(omega.grad == 0)
        np.testing.assert_allclose(lm.grad, omega.data[:, 0] / 3)

    def test_unit_omega_gradients_match_naive(self, rng):
        ps = ad.ParamStore()
        ps.add("w", rng.normal(size=(4, 3)))
        x, proj = rng.normal(size=(3, 4)), rng.normal(size=(3, 3))

        def grads(fn):
            ps.zero_grad()
            fn().backward()
            return ps["w"].grad.copy()

        def parts():
            y = ad.matmul(x, ps["w"])
            return ad.mean(ad.tabs(y), axis=-1), ad.mean(ad.mul(y, proj), axis=-1)
        g1 = grads(lambda: total_loss_stage1(*parts(), np.ones((3, 2))))
        g0 = grads(lambda: ad.mean(ad.add(*parts())))
        np.testing.assert_allclose(g1, g0, rtol=0, atol=1e-12)

    def test_stage2_all_kept_equals_stage1(self, rng):
        lm, lp, w = rng.random(4), rng.random(4), rng.uniform(0, 2, (4, 2))
        assert value(total_loss_stage2(lm, lp, np.ones(4), np.ones(4), w)) == \
            pytest.approx(value(total_loss_stage1(lm, lp, w)))

    def test_stage2_pe_gated_out(self, rng):
        lm = ad.Tensor(rng.random(2), requires_grad=True)
        lp = ad.Tensor(rng.random(2), requires_grad=True)
        w = np.ones((2, 2))
        total_loss_stage2(lm, lp, np.ones(2), np.zeros(2), w).backward()
        np.testing.assert_array_equal(lp.grad, 0.0)
        np.testing.assert_allclose(lm.grad, 0.5)

    def test_stage2_skip(self):
        assert total_loss_stage2(np.ones(2), np.ones(2), np.zeros(2), np.zeros(2),
                                 np.ones((2, 2))) is None


class TestNaiveWeights:
    def test_table_rows(self):
        cfg = NaiveDwhsConfig(upper_bound=5.0, omega_noise=0.2)
        y = np.zeros((2, 10))
        y[:, 3] = 1
        a = np.full((2, 10), 0.4)        # agreement 0.4 -> 1/0.4 = 2.5
        assert naive_dwhs_weights(Case.CASE1, y, a, cfg) == (1.0, 1.0)
        assert naive_dwhs_weights(Case.CASE2, y, a, cfg) == (1.0, 0.2)
        assert naive_dwhs_weights(Case.CASE3, y, a, cfg) == pytest.approx((2.5, 1.0))
        assert naive_dwhs_weights(Case.CASE4, y, a, cfg) == pytest.approx((1.0, 2.5))

    def test_clamp_ceiling_and_zero(self):
        y = np.zeros((1, 4))
        y[0, 0] = 1
        cfg = NaiveDwhsConfig(upper_bound=10.0)
        assert naive_dwhs_weights(Case.CASE4, y, np.full((1, 4), 0.05), cfg) == (1.0, 10.0)
        assert naive_dwhs_weights(Case.CASE3, y, np.zeros((1, 4)), cfg) == (10.0, 1.0)
        # perfect agreement gives 1/1 = 1, the floor of the clamp
        assert naive_dwhs_weights(Case.CASE3, y, y, cfg) == (1.0, 1.0)

    @given(st.floats(0, 1), st.floats(1, 10), st.sampled_from([Case.CASE3, Case.CASE4]))
    def test_bounds(self, peak, ub, case):
        y = np.zeros((1, 5))
        y[0, 1] = 1
        a = np.zeros((1, 5))
        a[0, 2] = peak
        w = max(naive_dwhs_weights(case, y, a, NaiveDwhsConfig(upper_bound=ub)))
        assert 1.0 <= w <= ub
        agreement = pitch_agreement(y, a)
        if agreement > 0:
            assert w == pytest.approx(min(max(1 / agreement, 1.0), ub))

    def test_agreement_over_voiced_frames(self):
        y = np.zeros((3, 4))
        y[0, 0] = y[1, 0] = 1
        a = np.zeros((3, 4))
        a[0, 1], a[1, 0], a[2, 3] = 0.2, 0.8, 0.9
        assert pitch_agreement(y, a) == pytest.approx(0.5)

    @pytest.mark.parametrize("kw", [{"upper_bound": 0.5}, {"upper_bound": 11},
                                    {"omega_noise": 1.0}, {"omega_noise": -0.1}])
    def test_config_ranges(self, kw):
        with pytest.raises(ValueError):
            NaiveDwhsConfig(**kw)
