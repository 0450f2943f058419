import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metarm.core import Examples, PreferencePair, UsageError, logistic, make_rng
from metarm.hypergrad import (
    CheckConfig,
    Hypergradient,
    backprop_through_trace,
    batch_hypergrad,
    check_hypergrad,
    compare,
    fd_hypergrad,
    inner_sgd_final,
    outer_loss,
    prop1_hypergrad,
    random_instance,
    run_inner_sgd,
)
from metarm.models import policy_grad, reward_grad, reward_value
from metarm.objectives import loss_pl


def _instance(seed, **kw):
    return random_instance(make_rng(seed, 5), CheckConfig(**kw))


class TestInnerTrace:
    def test_replay_is_bit_exact(self):
        task, phi, theta0, stream, _, alpha, beta, ridge = _instance(0, max_steps=10)
        trace = run_inner_sgd(phi, theta0, stream, alpha, beta, task, ridge)
        np.testing.assert_array_equal(trace.replay(), trace.theta_final)
        np.testing.assert_array_equal(
            inner_sgd_final(phi, theta0, stream, alpha, beta, task, ridge), trace.theta_final)

    def test_step_is_sgd_on_fine_tuning_loss(self):
        from metarm.objectives import loss_ft
        task, phi, theta0, stream, _, alpha, beta, ridge = _instance(1, min_steps=1, max_steps=1)
        trace = run_inner_sgd(phi, theta0, stream.take([0]), alpha, beta, task, ridge)
        grad = loss_ft(phi, theta0, stream[0], beta, task, ridge).grad
        np.testing.assert_allclose(trace.theta_final, theta0 - alpha * grad, rtol=1e-14, atol=1e-15)

    def test_rejects_bad_step_sizes(self):
        task, phi, theta0, stream, *_ = _instance(2)
        with pytest.raises(UsageError):
            run_inner_sgd(phi, theta0, stream, 0.0, 1.0, task)


class TestHypergradient:
    def test_zero_steps_give_exact_zero(self):
        for seed in range(10):
            task, phi, theta0, _, nu, alpha, beta, ridge = _instance(seed)
            empty = Examples(np.zeros(0, np.int64), np.zeros(0, np.int64))
            hg = prop1_hypergrad(run_inner_sgd(phi, theta0, empty, alpha, beta, task, ridge), nu, task)
            assert np.all(hg.vector == 0.0) and hg.vector.shape == (task.q,)

    def test_one_step_closed_form(self):
        # theta_1 = theta_0 + alpha * w * g, so d loss / d phi = (alpha w / beta) (grad_l . g) grad_r
        task, phi, theta0, stream, nu, alpha, beta, _ = _instance(3, min_steps=1, max_steps=1)
        x, y = stream[0]
        trace = run_inner_sgd(phi, theta0, stream.take([0]), alpha, beta, task)
        w = np.exp(reward_value(phi, x, y, task) / beta)
        grad_l = loss_pl(trace.theta_final, nu, task).grad
        expected = (alpha * w / beta) * (grad_l @ policy_grad(theta0, x, y, task)) * reward_grad(phi, x, y, task)
        np.testing.assert_allclose(prop1_hypergrad(trace, nu, task).vector, expected,
                                   rtol=1e-12, atol=1e-16)

    @settings(max_examples=25)
    @given(st.integers(0, 100_000))
    def test_matches_finite_differences(self, seed):
        task, phi, theta0, stream, nu, alpha, beta, ridge = _instance(seed)
        trace = run_inner_sgd(phi, theta0, stream, alpha, beta, task, ridge)
        analytic = prop1_hypergrad(trace, nu, task).vector
        numeric = fd_hypergrad(phi, theta0, stream, nu, alpha, beta, task, ridge)
        rel, cos = compare(analytic, numeric)
        assert rel <= 1e-5 and cos >= 1 - 1e-8

    def test_contribution_norms_per_step(self):
        task, phi, theta0, stream, nu, alpha, beta, ridge = _instance(4, min_steps=5)
        hg = prop1_hypergrad(run_inner_sgd(phi, theta0, stream, alpha, beta, task, ridge), nu, task)
        assert hg.contribution_norms.shape == (len(stream),)
        assert np.linalg.norm(hg.vector) <= hg.contribution_norms.sum() + 1e-15

    def test_batch_is_mean_of_singles(self):
        task, phi, theta0, stream, _, alpha, beta, ridge = _instance(5)
        trace = run_inner_sgd(phi, theta0, stream, alpha, beta, task, ridge)
        rng = make_rng(6)
        nus = []
        for _ in range(4):
            x = int(rng.integers(task.n_prompts))
            a, b = rng.choice(task.max_candidates, size=2, replace=False)
            nus.append(PreferencePair(x, int(a), int(b)))
        loss, grad = batch_hypergrad(trace, nus, task)
        singles = [prop1_hypergrad(trace, nu, task).vector for nu in nus]
        np.testing.assert_allclose(grad, np.mean(singles, axis=0), rtol=1e-12, atol=1e-16)
        assert loss == pytest.approx(np.mean([outer_loss(trace.theta_final, nu, task) for nu in nus]))

    def test_backprop_is_linear_in_seed(self):
        task, phi, theta0, stream, _, alpha, beta, ridge = _instance(7)
        trace = run_inner_sgd(phi, theta0, stream, alpha, beta, task, ridge)
        a, b = make_rng(8).normal(size=(2, task.p))
        lhs = backprop_through_trace(trace, 2 * a - b).vector
        rhs = 2 * backprop_through_trace(trace, a).vector - backprop_through_trace(trace, b).vector
        np.testing.assert_allclose(lhs, rhs, atol=1e-14)

    def test_outer_seed_direction(self):
        task, phi, theta0, stream, nu, alpha, beta, ridge = _instance(9)
        trace = run_inner_sgd(phi, theta0, stream, alpha, beta, task, ridge)
        from metarm.hypergrad import _margin_and_grad
        margin, gm = _margin_and_grad(trace.theta_final, nu, task)
        np.testing.assert_allclose(-(1 - logistic(margin)) * gm,
                                   loss_pl(trace.theta_final, nu, task).grad, atol=1e-14)

    def test_dimension_mismatch(self):
        task, phi, theta0, stream, nu, alpha, beta, ridge = _instance(10)
        trace = run_inner_sgd(phi, theta0, stream, alpha, beta, task, ridge)
        other = _instance(11, max_p=3, max_q=3)[0]
        if (other.p, other.q) != (task.p, task.q):
            with pytest.raises(UsageError):
                prop1_hypergrad(trace, PreferencePair(0, 0, 1), other)


class TestChecker:
    def test_passes_on_small_batch(self):
        report = check_hypergrad(CheckConfig(), n_instances=10, rng=make_rng(1))
        assert report.passed and len(report.rows) == 10

    def test_detects_a_dropped_hessian_term(self):
        def no_hessian(trace, nu, task):
            from metarm.hypergrad import _margin_and_grad
            margin, gm = _margin_and_grad(trace.theta_final, nu, task)
            v = gm * (1 - logistic(margin))
            out = np.zeros(task.q)
            for t in range(trace.n_steps - 1, -1, -1):
                out += (-trace.alpha / trace.beta) * trace.weights[t] * (trace.grad_logp[t] @ v) * trace.grad_reward[t]
            return Hypergradient(out)

        report = check_hypergrad(CheckConfig(min_steps=3), n_instances=10, rng=make_rng(1),
                                 hypergrad_fn=no_hessian)
        assert not report.passed

    def test_detects_a_sign_flip(self):
        flipped = lambda trace, nu, task: Hypergradient(-prop1_hypergrad(trace, nu, task).vector)
        report = check_hypergrad(n_instances=5, rng=make_rng(2), hypergrad_fn=flipped)
        assert not report.passed and report.min_cosine < 0

    def test_compare(self):
        assert compare(np.zeros(3), np.zeros(3)) == (0.0, 1.0)
        assert compare(np.ones(2), np.zeros(2))[0] == np.inf
        rel, cos = compare(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        assert rel == 0.0 and cos == 1.0

    def test_rejects_zero_instances(self):
        with pytest.raises(UsageError):
            check_hypergrad(n_instances=0)
