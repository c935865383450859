import numpy as np
import pytest

from sparseplan.gradcheck import check_gradient
from sparseplan.rng import seeded_stream
from sparseplan.router import (
    GateParams,
    LoadStats,
    RoutingDecision,
    gate_backward,
    gate_forward,
    gate_logits,
    mix_experts,
    pool_for_routing,
    route_backward,
    route_topk,
    utilization_stats,
)


def make_params(d, N, stream=None, eps_noise=1e-2):
    if stream is None:
        return GateParams(np.zeros((d, N)), np.zeros((d, N)), eps_noise)
    return GateParams(0.5 * stream.normal((d, N)), 0.5 * stream.normal((d, N)),
                      eps_noise)


class TestPooling:
    def test_single_row_is_identity(self):
        x = seeded_stream(0, "pool").normal((3, 1, 4))
        np.testing.assert_array_equal(pool_for_routing(x), x[:, 0])

    def test_duplicated_rows_idempotent(self):
        row = seeded_stream(1, "pool").normal((2, 1, 4))
        dup = np.repeat(row, 5, axis=1)
        np.testing.assert_allclose(pool_for_routing(dup), row[:, 0], atol=1e-12)

    def test_hand_mean(self):
        x = np.array([[[1.0], [3.0]]])
        assert pool_for_routing(x)[0, 0] == 2.0


class TestGate:
    def test_eval_mode_is_clean_linear_map(self):
        params = GateParams(np.eye(4), np.ones((4, 4)), 1e-2)
        x = np.zeros((1, 4))
        x[0, 2] = 1.0
        g = gate_logits(x, params, "eval")
        np.testing.assert_array_equal(g, x)

    def test_train_noise_scale_at_zero_input(self):
        # W_noise = 0, x = 0: g = eta * (softplus(0) + eps) = eta * (ln 2 + eps)
        params = make_params(3, 5, eps_noise=1e-2)
        x = np.zeros((4, 3))
        rng = seeded_stream(7, "router-noise")
        g = gate_logits(x, params, "train", rng=rng)
        eta = seeded_stream(7, "router-noise").normal((4, 5))
        np.testing.assert_allclose(g, eta * (np.log(2.0) + 1e-2), atol=1e-12)

    def test_monte_carlo_std_matches_softplus_scale(self):
        stream = seeded_stream(2, "mc")
        d, N = 6, 4
        params = make_params(d, N, stream)
        x_row = stream.normal(d)
        want = np.logaddexp(0.0, x_row @ params.W_noise) + params.eps_noise
        x = np.tile(x_row, (10**5, 1))
        g = gate_logits(x, params, "train", rng=seeded_stream(3, "mc-noise"))
        got = g.std(axis=0)
        np.testing.assert_allclose(got, want, rtol=0.02)

    def test_explicit_eta_reproduces(self):
        stream = seeded_stream(4, "eta")
        params = make_params(3, 4, stream)
        x = stream.normal((2, 3))
        eta = stream.normal((2, 4))
        g1, _ = gate_forward(x, params, "train", eta=eta)
        g2, _ = gate_forward(x, params, "train", eta=eta)
        np.testing.assert_array_equal(g1, g2)

    def test_train_mode_requires_noise_source(self):
        params = make_params(2, 2)
        with pytest.raises(ValueError):
            gate_forward(np.zeros((1, 2)), params, "train")
        with pytest.raises(ValueError):
            gate_forward(np.zeros((1, 2)), params, "typo")

    def test_eps_noise_positive_required(self):
        with pytest.raises(ValueError):
            GateParams(np.zeros((2, 2)), np.zeros((2, 2)), 0.0)

    def test_gate_backward_fd(self):
        stream = seeded_stream(5, "gate-bwd")
        d, N, B = 4, 3, 2
        params = make_params(d, N, stream)
        x = stream.normal((B, d))
        eta = stream.normal((B, N))
        cot = stream.normal((B, N))

        _, cache = gate_forward(x, params, "train", eta=eta)
        d_x, dW_gate, dW_noise = gate_backward(cache, cot)

        def loss(wg, wn, xv):
            p = GateParams(wg, wn, params.eps_noise)
            g, _ = gate_forward(xv, p, "train", eta=eta)
            return float((g * cot).sum())

        for arr, grad, fn in [
            (params.W_gate, dW_gate,
             lambda v: loss(v.reshape(d, N), params.W_noise, x)),
            (params.W_noise, dW_noise,
             lambda v: loss(params.W_gate, v.reshape(d, N), x)),
            (x, d_x, lambda v: loss(params.W_gate, params.W_noise, v.reshape(B, d))),
        ]:
            rep = check_gradient(fn, arr.ravel(), grad.ravel(),
                                 step=1e-6, tolerance=1e-7)
            assert rep.passed, rep


class TestRouteTopK:
    def test_uniform_logits_tie_break_lowest(self):
        dec = route_topk(np.zeros((1, 8)), k=4)[0]
        np.testing.assert_array_equal(dec.selected, [0, 1, 2, 3])
        np.testing.assert_allclose(dec.scores, 1.0 / 8.0, atol=1e-12)
        assert dec.scores.sum() == pytest.approx(0.5)

    def test_saturated_logit_scores_near_one(self):
        # deficit is (N-1) * e^-20, so 1e-8 needs a small expert count
        logits = np.zeros((1, 4))
        logits[0, 3] = 20.0
        dec = route_topk(logits, k=1)[0]
        assert dec.selected[0] == 3
        assert abs(dec.scores[0] - 1.0) < 1e-8

    def test_hand_softmax_top2(self):
        dec = route_topk(np.array([[2.0, 1.0, 0.0, -1.0]]), k=2)[0]
        np.testing.assert_array_equal(dec.selected, [0, 1])
        np.testing.assert_allclose(dec.scores, [0.6439, 0.2369], atol=1e-4)

    def test_shift_invariance_exact(self):
        stream = seeded_stream(6, "shift")
        logits = stream.normal((5, 8))
        base = route_topk(logits, k=3)
        moved = route_topk(logits + 100.0, k=3)
        for a, b in zip(base, moved):
            np.testing.assert_array_equal(a.selected, b.selected)
            np.testing.assert_allclose(a.probs, b.probs, atol=1e-12)
            np.testing.assert_allclose(a.scores, b.scores, atol=1e-12)

    def test_brute_force_sort_oracle(self):
        stream = seeded_stream(7, "oracle")
        for _ in range(50):
            logits = stream.normal((4, 8))
            k = int(stream.integers(1, 9))
            for dec in route_topk(logits, k=k):
                want = np.sort(dec.probs)[::-1][:k]
                np.testing.assert_allclose(dec.scores, want, atol=1e-12)
                assert dec.probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_score_mass_bounds(self):
        stream = seeded_stream(8, "mass")
        logits = stream.normal((3, 6))
        for k in range(1, 7):
            for dec in route_topk(logits, k=k):
                total = dec.scores.sum()
                assert 0.0 < total <= 1.0 + 1e-12
                if k == 6:
                    assert total == pytest.approx(1.0, abs=1e-12)
                else:
                    assert total < 1.0

    def test_renormalize_flag(self):
        dec = route_topk(np.array([[2.0, 1.0, 0.0, -1.0]]), k=2,
                         renormalize=True)[0]
        assert dec.scores.sum() == pytest.approx(1.0, abs=1e-12)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            route_topk(np.zeros((1, 4)), k=0)
        with pytest.raises(ValueError):
            route_topk(np.zeros((1, 4)), k=5)

    def test_eval_determinism_bitwise(self):
        stream = seeded_stream(9, "det")
        params = make_params(5, 8, stream)
        x = stream.normal((3, 5))
        a = route_topk(gate_logits(x, params, "eval"), k=4)
        b = route_topk(gate_logits(x, params, "eval"), k=4)
        for da, db in zip(a, b):
            np.testing.assert_array_equal(da.probs, db.probs)
            np.testing.assert_array_equal(da.selected, db.selected)
            np.testing.assert_array_equal(da.scores, db.scores)


class TestMixAndStats:
    def test_single_expert_scales_output(self):
        dec = RoutingDecision(np.zeros(4), np.full(4, 0.25),
                              np.array([2]), np.array([0.25]))
        out = seeded_stream(10, "mix").normal((2, 3))
        np.testing.assert_allclose(mix_experts(dec, [out]), 0.25 * out, atol=1e-15)

    def test_equal_outputs_add_scores(self):
        dec = RoutingDecision(np.zeros(4), np.full(4, 0.25),
                              np.array([0, 1]), np.array([0.3, 0.2]))
        out = seeded_stream(11, "mix").normal((2, 2))
        np.testing.assert_allclose(mix_experts(dec, [out, out]), 0.5 * out,
                                   atol=1e-15)

    def test_linear_in_outputs(self):
        stream = seeded_stream(12, "mix")
        dec = route_topk(stream.normal((1, 5)), k=3)[0]
        outs = [stream.normal((2, 4)) for _ in range(3)]
        scaled = [3.0 * o for o in outs]
        np.testing.assert_allclose(
            mix_experts(dec, scaled), 3.0 * mix_experts(dec, outs), atol=1e-12
        )

    def test_count_mismatch_raises(self):
        dec = route_topk(np.zeros((1, 4)), k=2)[0]
        with pytest.raises(ValueError):
            mix_experts(dec, [np.zeros((1, 1))])

    def test_uniform_selection_counts(self):
        decisions = route_topk(np.zeros((6, 8)), k=4)
        stats = utilization_stats(decisions)
        np.testing.assert_allclose(stats.f, [0.25, 0.25, 0.25, 0.25, 0, 0, 0, 0])
        np.testing.assert_allclose(stats.P, 1.0 / 8.0)

    def test_single_decision_P_equals_probs(self):
        dec = route_topk(np.array([[1.0, 0.0, -1.0]]), k=2)
        stats = utilization_stats(dec)
        np.testing.assert_array_equal(stats.P, dec[0].probs)

    def test_hand_built_mixed_batch(self):
        d1 = RoutingDecision(np.zeros(4), np.array([0.4, 0.3, 0.2, 0.1]),
                             np.array([0, 1]), np.array([0.4, 0.3]))
        d2 = RoutingDecision(np.zeros(4), np.array([0.1, 0.2, 0.3, 0.4]),
                             np.array([3, 2]), np.array([0.4, 0.3]))
        stats = utilization_stats([d1, d2])
        np.testing.assert_allclose(stats.f, [0.25, 0.25, 0.25, 0.25])
        np.testing.assert_allclose(stats.P, [0.25, 0.25, 0.25, 0.25])
        assert stats.f.sum() == pytest.approx(1.0)
        assert stats.P.sum() == pytest.approx(1.0)

    def test_mismatched_k_rejected(self):
        a = route_topk(np.zeros((1, 4)), k=2)[0]
        b = route_topk(np.zeros((1, 4)), k=3)[0]
        with pytest.raises(ValueError):
            utilization_stats([a, b])
        with pytest.raises(ValueError):
            utilization_stats([])


class TestRouteBackward:
    @pytest.mark.parametrize("renormalize", [False, True])
    def test_matches_finite_differences(self, renormalize):
        stream = seeded_stream(13, "route-bwd")
        B, N, k = 3, 6, 3
        logits = stream.normal((B, N))
        d_scores = stream.normal((B, k))
        d_probs = 0.3 * stream.normal((B, N))

        decisions = route_topk(logits, k=k, renormalize=renormalize)
        probs = np.stack([d.probs for d in decisions])
        selected = np.stack([d.selected for d in decisions])
        d_logits = route_backward(probs, selected, d_scores, d_probs,
                                  renormalize=renormalize)

        def fn(v):
            decs = route_topk(v.reshape(B, N), k=k, renormalize=renormalize)
            total = 0.0
            for b, dec in enumerate(decs):
                total += float(dec.scores @ d_scores[b])
                total += float(dec.probs @ d_probs[b])
            return total

        rep = check_gradient(fn, logits.ravel(), d_logits.ravel(),
                             step=1e-6, tolerance=1e-6)
        assert rep.passed, rep
