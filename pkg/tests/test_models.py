import math

import numpy as np
import pytest

from fedsurv import nn
from fedsurv.data import TimeBins, discretize
from fedsurv.models import (Head, breslow_baseline, breslow_baseline_coxtime,
                            case_control_loss, coxcc_loss, coxph_loss,
                            coxtime_loss, cox_survival, deephit_loss,
                            deephit_survival, predict_survival, sample_controls,
                            softmax)
from fedsurv.stepfun import StepFunction


def naive_coxph(g, t, e):
    """The displayed partial-likelihood formula, evaluated by double loop."""
    n = len(g)
    total = 0.0
    for i in range(n):
        if e[i] != 1:
            continue
        denom = sum(math.exp(g[j] - g[i]) for j in range(n) if t[j] >= t[i])
        total += math.log(denom)
    return total / n


class TestCoxPH:
    def test_two_events_hand_example(self):
        loss, grad = coxph_loss([0.0, 0.0], [1.0, 2.0], [1, 1])
        # risk sets {1,2} and {2}: (log 2 + log 1)/2
        assert abs(loss - math.log(2.0) / 2.0) < 1e-12
        assert abs(loss - 0.34657) < 1e-5
        assert grad.shape == (2,)

    def test_all_censored_is_zero(self):
        loss, grad = coxph_loss([0.3, -0.2, 1.0], [1.0, 2.0, 3.0], [0, 0, 0])
        assert loss == 0.0
        assert np.all(grad == 0.0)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_naive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = 3 + seed
        g = rng.standard_normal(n)
        t = rng.uniform(0.5, 5.0, n)
        if seed % 3 == 0:  # exercise ties
            t[0] = t[-1]
        e = rng.integers(0, 2, n)
        e[0] = 1
        loss, _ = coxph_loss(g, t, e)
        assert abs(loss - naive_coxph(g, t, e)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        g = rng.standard_normal(6)
        t = rng.uniform(0.5, 4.0, 6)
        e = np.array([1, 0, 1, 1, 0, 1])
        _, grad = coxph_loss(g, t, e)
        fd = nn.finite_difference_gradient(lambda v: coxph_loss(v, t, e)[0], g)
        np.testing.assert_allclose(grad, fd, atol=1e-7)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        g = rng.standard_normal(7)
        t = rng.uniform(1, 9, 7)
        e = np.array([1, 1, 0, 1, 0, 0, 1])
        l0, g0 = coxph_loss(g, t, e)
        l1, g1 = coxph_loss(g + 17.5, t, e)
        assert abs(l0 - l1) < 1e-10
        np.testing.assert_allclose(g0, g1, atol=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            coxph_loss([0.0], [0.0], [1])  # nonpositive duration
        with pytest.raises(ValueError):
            coxph_loss([0.0, 0.0], [1.0, 2.0], [1, 2])  # nonbinary event


class TestCoxCC:
    def test_full_risk_set_equals_coxph(self):
        rng = np.random.default_rng(4)
        n = 9
        g = rng.standard_normal(n)
        t = rng.uniform(1, 10, n)
        e = rng.integers(0, 2, n)
        e[:2] = 1
        cases = [i for i in range(n) if e[i] == 1
                 and sum(t[j] >= t[i] for j in range(n)) > 1]
        ctrls = [np.array([j for j in range(n) if t[j] >= t[i] and j != i])
                 for i in cases]
        loss, _ = case_control_loss(g, np.array(cases), ctrls, n)
        want, _ = coxph_loss(g, t, e)
        assert abs(loss - want) < 1e-12

    def test_single_pair_equal_scores_gives_log2(self):
        loss, _ = case_control_loss(np.array([0.7, 0.7]), np.array([0]),
                                    np.array([[1]]), 1)
        assert abs(loss - math.log(2.0)) < 1e-15

    def test_replayed_sampling_oracle(self):
        rng = np.random.default_rng(31)
        n = 8
        g = rng.standard_normal(n)
        t = rng.uniform(1, 6, n)
        e = np.array([1, 0, 1, 1, 0, 1, 0, 1])
        loss, _ = coxcc_loss(g, t, e, controls_per_case=2,
                             rng=np.random.default_rng(77))
        # replay the same draws and apply the displayed formula directly
        cases, ctrls = sample_controls(t, e, 2, np.random.default_rng(77))
        want = sum(math.log(1.0 + sum(math.exp(g[c] - g[i]) for c in row))
                   for i, row in zip(cases, ctrls)) / n
        assert abs(loss - want) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        n = 7
        g = rng.standard_normal(n)
        t = rng.uniform(1, 8, n)
        e = np.array([1, 1, 0, 1, 0, 1, 0])
        cases, ctrls = sample_controls(t, e, 2, np.random.default_rng(5))
        _, grad = case_control_loss(g, cases, ctrls, n)
        fd = nn.finite_difference_gradient(
            lambda v: case_control_loss(v, cases, ctrls, n)[0], g)
        np.testing.assert_allclose(grad, fd, atol=1e-7)

    def test_sole_survivor_case_dropped(self):
        # the last event's risk set is only itself: contributes log 1 = 0
        g = np.array([0.0, 1.0])
        loss, grad = coxcc_loss(g, [1.0, 2.0], [0, 1], 1, np.random.default_rng(0))
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_controls_uniform_over_risk_set(self):
        t = np.array([1.0, 2.0, 3.0, 4.0])
        e = np.array([1, 0, 0, 0])
        rng = np.random.default_rng(123)
        counts = np.zeros(4)
        for _ in range(6000):
            _, ctrl = sample_controls(t, e, 1, rng)
            counts[ctrl[0, 0]] += 1
        assert counts[0] == 0  # never itself
        np.testing.assert_allclose(counts[1:] / 6000, 1 / 3, atol=0.03)


class TestCoxTime:
    def _net(self, p, seed=0):
        spec = nn.MlpSpec((p + 1, 6, 1))
        params = nn.init_params(spec, np.random.default_rng(seed))
        return spec, params

    def test_time_blind_network_reduces_to_coxcc(self):
        rng = np.random.default_rng(6)
        n, p = 9, 3
        x = rng.standard_normal((n, p))
        t = rng.uniform(1, 7, n)
        e = rng.integers(0, 2, n)
        e[:3] = 1
        spec, params = self._net(p, seed=3)
        # zero out first-column (time) weights of layer 0
        (w0, b0), (w1, b1) = nn.unflatten(spec, params)
        w0 = w0.copy()
        w0[0, :] = 0.0
        params = nn.flatten(spec, [(w0, b0), (w1, b1)])

        loss_t, _ = coxtime_loss(spec, params, x, t, e, 2,
                                 np.random.default_rng(55))
        g = nn.forward(spec, params, np.hstack([np.zeros((n, 1)), x]))[:, 0]
        loss_cc, _ = coxcc_loss(g, t, e, 2, np.random.default_rng(55))
        assert abs(loss_t - loss_cc) < 1e-12

    def test_single_pair_equal_scores_gives_log2_over_n(self):
        # all-zero network scores everything equally
        n, p = 2, 2
        spec = nn.MlpSpec((p + 1, 4, 1))
        params = np.zeros(spec.n_params)
        x = np.random.default_rng(1).standard_normal((n, p))
        loss, _ = coxtime_loss(spec, params, x, [1.0, 2.0], [1, 0], 1,
                               np.random.default_rng(2))
        assert abs(loss - math.log(2.0) / n) < 1e-15

    def test_replayed_sampling_oracle(self):
        rng = np.random.default_rng(8)
        n, p = 8, 3
        x = rng.standard_normal((n, p))
        t = rng.uniform(1, 9, n)
        e = np.array([1, 1, 0, 1, 0, 1, 0, 0])
        spec, params = self._net(p, seed=9)
        mean, std = 4.0, 2.0
        loss, _ = coxtime_loss(spec, params, x, t, e, 2,
                               np.random.default_rng(13), mean, std)
        cases, ctrls = sample_controls(t, e, 2, np.random.default_rng(13))
        want = 0.0
        for i, row in zip(cases, ctrls):
            ti = (t[i] - mean) / std
            gi = nn.forward(spec, params, np.array([[ti, *x[i]]]))[0, 0]
            acc = 0.0
            for c in row:
                gc = nn.forward(spec, params, np.array([[ti, *x[c]]]))[0, 0]
                acc += math.exp(gc - gi)
            want += math.log(1.0 + acc)
        assert abs(loss - want / n) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        n, p = 6, 2
        x = rng.standard_normal((n, p))
        t = rng.uniform(1, 5, n)
        e = np.array([1, 0, 1, 1, 0, 1])
        spec, params = self._net(p, seed=4)

        _, grad = coxtime_loss(spec, params, x, t, e, 2,
                               np.random.default_rng(99), 2.0, 1.5)
        fd = nn.finite_difference_gradient(
            lambda v: coxtime_loss(spec, v, x, t, e, 2,
                                   np.random.default_rng(99), 2.0, 1.5)[0],
            params)
        scale = np.maximum(np.abs(fd), 1e-6)
        assert np.max(np.abs(grad - fd) / scale) < 1e-4

    def test_input_dim_check(self):
        spec = nn.MlpSpec((3, 2, 1))
        with pytest.raises(nn.ShapeError):
            coxtime_loss(spec, np.zeros(spec.n_params), np.zeros((4, 3)),
                         [1, 2, 3, 4], [1, 0, 0, 1], 1, np.random.default_rng(0))


def naive_deephit(pmf, b, e, alpha, sigma):
    """All-pairs brute force of the displayed two-part loss."""
    n, _ = pmf.shape
    floor = 1e-7
    cum = np.cumsum(pmf, axis=1)
    nll = 0.0
    for i in range(n):
        if e[i] == 1:
            nll -= math.log(max(pmf[i, b[i]], floor))
        else:
            nll -= math.log(max(1.0 - cum[i, b[i]], floor))
    nll /= n
    pairs = []
    for i in range(n):
        for j in range(n):
            if i != j and e[i] == 1 and b[i] < b[j]:
                pairs.append(math.exp(-(cum[i, b[i]] - cum[j, b[i]]) / sigma))
    rank = sum(pairs) / len(pairs) if pairs else 0.0
    return alpha * nll + (1 - alpha) * rank


class TestDeepHit:
    def test_perfect_mass_zero_loss(self):
        pmf = np.array([[0.0, 1.0, 0.0]])
        loss, _ = deephit_loss(pmf, [1], [1], alpha=1.0, sigma_rank=0.1)
        assert loss == 0.0

    def test_tied_cif_rank_is_one(self):
        pmf = np.array([[0.5, 0.3, 0.2], [0.5, 0.3, 0.2]])
        loss, _ = deephit_loss(pmf, [0, 1], [1, 0], alpha=0.0, sigma_rank=0.1)
        assert abs(loss - 1.0) < 1e-12  # exp(0) over the single pair

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n, nb = 5, 4
        pmf = softmax(rng.standard_normal((n, nb)))
        b = rng.integers(0, nb, n)
        e = rng.integers(0, 2, n)
        loss, _ = deephit_loss(pmf, b, e, alpha=0.4, sigma_rank=0.25)
        assert abs(loss - naive_deephit(pmf, b, e, 0.4, 0.25)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        n, nb = 6, 5
        logits = rng.standard_normal((n, nb))
        b = rng.integers(0, nb, n)
        e = np.array([1, 0, 1, 1, 0, 1])

        def loss_of(flat):
            z = flat.reshape(n, nb)
            return deephit_loss(softmax(z), b, e, 0.3, 0.2)[0]

        _, dlogits = deephit_loss(softmax(logits), b, e, 0.3, 0.2)
        fd = nn.finite_difference_gradient(loss_of, logits.ravel())
        np.testing.assert_allclose(dlogits.ravel(), fd, atol=1e-7)

    def test_censored_in_last_bin_clamped(self):
        pmf = np.array([[0.3, 0.7]])
        loss, _ = deephit_loss(pmf, [1], [0], alpha=1.0, sigma_rank=0.1)
        assert abs(loss - (-math.log(1e-7))) < 1e-9

    def test_rejects_invalid_pmf(self):
        with pytest.raises(ValueError):
            deephit_loss(np.array([[0.5, 0.6]]), [0], [1], 0.5, 0.1)
        with pytest.raises(ValueError):
            deephit_loss(np.array([[0.5, 0.5]]), [0], [1], 1.5, 0.1)


class TestBreslow:
    def test_single_event_unit_jump(self):
        h0 = breslow_baseline([0.0], [3.0], [1])
        assert np.array_equal(h0.times, [3.0])
        assert abs(h0.values[0] - 1.0) < 1e-15
        assert h0(2.9) == 0.0

    def test_two_event_hand_example(self):
        h0 = breslow_baseline([0.0, 0.0], [1.0, 2.0], [1, 1])
        assert abs(h0(1.0) - 0.5) < 1e-15
        assert abs(h0(2.0) - 1.5) < 1e-15

    def test_no_events_error(self):
        with pytest.raises(ValueError, match="no events"):
            breslow_baseline([0.0, 0.0], [1.0, 2.0], [0, 0])

    def test_shift_cancels_in_predictions(self):
        rng = np.random.default_rng(3)
        n = 12
        g = rng.standard_normal(n)
        t = rng.uniform(1, 10, n)
        e = rng.integers(0, 2, n)
        e[:4] = 1
        shift = 3.7
        curves_a = cox_survival(breslow_baseline(g, t, e), g)
        curves_b = cox_survival(breslow_baseline(g + shift, t, e), g + shift)
        query = np.linspace(0.5, 10, 25)
        for ca, cb in zip(curves_a, curves_b):
            np.testing.assert_allclose(ca(query), cb(query), atol=1e-12)

    def test_tied_events_share_denominator(self):
        # two events at the same time each add 1/sum(exp g over risk set)
        h0 = breslow_baseline([0.0, 0.0, 0.0], [2.0, 2.0, 5.0], [1, 1, 0])
        assert np.array_equal(h0.times, [2.0])
        assert abs(h0.values[0] - 2.0 / 3.0) < 1e-15


class TestPredict:
    def test_unit_hazard_ratio(self):
        h0 = StepFunction([1.0, 2.0], [0.5, 1.5], initial=0.0)
        (curve,) = cox_survival(h0, [0.0])
        assert abs(curve(1.5) - math.exp(-0.5)) < 1e-15
        assert abs(curve(2.5) - math.exp(-1.5)) < 1e-15
        assert curve(0.5) == 1.0

    def test_deephit_two_bins(self):
        bins = TimeBins([0.0, 12.0, 24.0])
        (curve,) = deephit_survival(np.array([[0.5, 0.5]]), bins)
        assert curve(11.0) == 1.0      # before the first bin closes
        assert curve(12.0) == 0.5      # after bin 1
        assert curve(24.0) == 0.0      # after bin 2

    def test_cox_matches_direct_formula(self):
        rng = np.random.default_rng(14)
        n = 10
        g = rng.standard_normal(n)
        t = rng.uniform(1, 8, n)
        e = np.ones(n, dtype=int)
        h0 = breslow_baseline(g, t, e)
        curves = cox_survival(h0, g)
        query = rng.uniform(0.5, 9, 20)
        for gi, c in zip(g, curves):
            want = np.exp(-h0(query) * math.exp(gi))
            np.testing.assert_allclose(c(query), want, rtol=1e-12)

    def test_monotone_bounded_and_complement(self):
        rng = np.random.default_rng(18)
        n = 8
        g = rng.standard_normal(n)
        t = rng.uniform(1, 6, n)
        e = rng.integers(0, 2, n)
        e[0] = 1
        curves = cox_survival(breslow_baseline(g, t, e), g)
        grid = np.linspace(0.5, 7, 40)
        for c in curves:
            vals = c(grid)
            assert np.all(np.diff(vals) <= 1e-15)
            assert np.all((0.0 <= vals) & (vals <= 1.0))
            np.testing.assert_allclose(vals + c.complement()(grid), 1.0, atol=1e-12)

    def test_dispatcher_and_errors(self):
        spec = nn.MlpSpec((2, 1))
        params = np.zeros(3)
        with pytest.raises(ValueError, match="baseline"):
            predict_survival("coxph", spec, params, {}, np.zeros((1, 2)))
        with pytest.raises(ValueError, match="unknown model"):
            predict_survival("weird", spec, params, {}, np.zeros((1, 2)))

    def test_coxtime_prediction_monotone(self):
        rng = np.random.default_rng(25)
        n, p = 20, 3
        x = rng.standard_normal((n, p))
        t = rng.uniform(1, 12, n)
        e = rng.integers(0, 2, n)
        e[:6] = 1
        spec = nn.MlpSpec((p + 1, 8, 1))
        params = nn.init_params(spec, rng)
        h0 = breslow_baseline_coxtime(spec, params, x, t, e, 5.0, 3.0)
        aux = {"baseline": h0, "time_mean": 5.0, "time_std": 3.0}
        grid = np.linspace(1.0, 12.0, 30)
        curves = predict_survival("coxtime", spec, params, aux, x[:5], grid)
        for c in curves:
            vals = c(grid)
            assert np.all(np.diff(vals) <= 1e-15)
            assert np.all((0.0 <= vals) & (vals <= 1.0))

    def test_coxtime_baseline_matches_plain_when_time_blind(self):
        rng = np.random.default_rng(30)
        n, p = 15, 2
        x = rng.standard_normal((n, p))
        t = rng.uniform(1, 9, n)
        e = rng.integers(0, 2, n)
        e[:5] = 1
        spec = nn.MlpSpec((p + 1, 6, 1))
        params = nn.init_params(spec, np.random.default_rng(2))
        (w0, b0), (w1, b1) = nn.unflatten(spec, params)
        w0 = w0.copy()
        w0[0, :] = 0.0
        params = nn.flatten(spec, [(w0, b0), (w1, b1)])
        h_td = breslow_baseline_coxtime(spec, params, x, t, e)
        g = nn.forward(spec, params, np.hstack([np.zeros((n, 1)), x]))[:, 0]
        h_plain = breslow_baseline(g, t, e)
        np.testing.assert_allclose(h_td.values, h_plain.values, rtol=1e-12)


class TestHead:
    def test_deephit_needs_bins(self):
        with pytest.raises(ValueError):
            Head(kind="deephit")

    def test_cox_zero_event_batch_not_trainable(self):
        head = Head(kind="coxph")
        assert not head.batch_trainable([1.0, 2.0], [0, 0])
        assert head.batch_trainable([1.0, 2.0], [0, 1])

    def test_deephit_always_trainable(self):
        bins, _ = discretize([5.0, 30.0], 12.0)
        head = Head(kind="deephit", bins=bins)
        assert head.batch_trainable([1.0], [0])

    @pytest.mark.parametrize("kind", ["coxph", "coxcc", "coxtime", "deephit"])
    def test_loss_and_grad_runs_and_fd_checks(self, kind):
        rng = np.random.default_rng(40)
        n, p = 7, 3
        x = rng.standard_normal((n, p))
        t = rng.uniform(1, 30, n)
        e = rng.integers(0, 2, n)
        e[:3] = 1
        kwargs = {}
        if kind == "deephit":
            bins, _ = discretize(t, 12.0)
            kwargs["bins"] = bins
        if kind == "coxtime":
            kwargs.update(time_mean=float(t.mean()), time_std=float(t.std()))
        head = Head(kind=kind, **kwargs)
        spec = nn.MlpSpec((head.net_input_dim(p), 8, head.output_dim()))
        params = nn.init_params(spec, rng)

        _, grad = head.loss_and_grad(spec, params, x, t, e, np.random.default_rng(3))
        fd = nn.finite_difference_gradient(
            lambda v: head.loss_and_grad(spec, v, x, t, e,
                                         np.random.default_rng(3))[0], params)
        scale = np.maximum(np.abs(fd), 1e-6)
        assert np.max(np.abs(grad - fd) / scale) < 1e-4
