import numpy as np
import pytest

from topicsynth.core import make_rng
from topicsynth.dp_stats import StatisticsBundle, n_pairs
from topicsynth.model import model_statistics
from topicsynth.trainer import (
    ACROSS,
    SINGLE,
    WITHIN,
    AdamState,
    TrainConfig,
    adam_step,
    enumerate_terms,
    evaluate_objective,
    gradient_minibatch,
    model_term_values,
    num_terms,
    train,
)


def bundle_from_model(theta) -> StatisticsBundle:
    """Week-averaged statistics of a model, usable as targets."""
    st = model_statistics(theta)
    return StatisticsBundle(
        st["single"].mean(axis=0), st["within"].mean(axis=0), st["across"].mean(axis=0), theta.shape[2]
    )


def random_targets(V, k, seed=0):
    rng = make_rng(seed)
    return StatisticsBundle(rng.random(V), rng.random(n_pairs(V)), rng.random((V, V)), k)


def test_term_counts():
    assert num_terms(2, 3) == 21
    assert num_terms(4, 469) == 1_100_743
    assert len(enumerate_terms(random_targets(3, 2), 2)) == 21
    terms = enumerate_terms(random_targets(4, 2), 1)
    assert not np.any(terms.kind == ACROSS)


def test_term_coverage():
    V, r = 5, 3
    tg = random_targets(V, 2)
    terms = enumerate_terms(tg, r)
    assert np.sum(terms.kind == SINGLE) == r * V
    assert np.sum(terms.kind == WITHIN) == r * n_pairs(V)
    assert np.sum(terms.kind == ACROSS) == (r - 1) * V * V
    # Every week carries the week-averaged target.
    single = terms.kind == SINGLE
    for i in range(r):
        sel = single & (terms.week == i)
        assert np.array_equal(terms.target[sel], tg.q_single[terms.o1[sel] - 1])


def test_self_consistent_targets_give_zero_objective():
    theta = np.repeat(make_rng(1).normal(size=(3, 1, 2, 5)), 2, axis=1)
    terms = enumerate_terms(bundle_from_model(theta), 2)
    assert evaluate_objective(theta, terms) < 1e-18
    _, grad = gradient_minibatch(theta, terms)
    assert np.abs(grad).max() < 1e-12


def test_single_term_contribution():
    # One slot with P(topic 1) = 0.3 against a target of 0.5.
    theta = np.log(np.array([0.3, 0.7])).reshape(1, 1, 1, 2)
    tg = StatisticsBundle(np.array([0.5, 0.7]), np.zeros(1), np.zeros((2, 2)), 1)
    terms = enumerate_terms(tg, 1)
    one = terms.take(np.flatnonzero((terms.kind == SINGLE) & (terms.o1 == 1)))
    assert evaluate_objective(theta, one) == pytest.approx(0.04, abs=1e-15)


def test_partition_additivity():
    theta = make_rng(2).normal(size=(4, 2, 3, 6))
    terms = enumerate_terms(random_targets(6, 3), 2)
    full = evaluate_objective(theta, terms)
    order = make_rng(3).permutation(len(terms))
    parts = np.array_split(order, 7)
    weighted = sum(evaluate_objective(theta, terms.take(p)) * len(p) for p in parts) / len(terms)
    assert weighted == pytest.approx(full, rel=1e-12, abs=0)
    values = model_term_values(theta, terms)
    assert np.mean((values - terms.target) ** 2) == pytest.approx(full, rel=1e-12)


@pytest.mark.parametrize("kind", [SINGLE, WITHIN, ACROSS])
def test_gradient_finite_differences(kind):
    rng = make_rng(4)
    theta = rng.normal(size=(4, 2, 3, 6))
    terms = enumerate_terms(random_targets(6, 3, seed=5), 2)
    batch = terms.take(np.flatnonzero(terms.kind == kind))
    _, grad = gradient_minibatch(theta, batch)
    h = 1e-4
    for flat in rng.choice(theta.size, 50, replace=False):
        idx = np.unravel_index(flat, theta.shape)
        up, dn = theta.copy(), theta.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (evaluate_objective(up, batch) - evaluate_objective(dn, batch)) / (2 * h)
        assert abs(grad[idx] - fd) <= 1e-4 * max(abs(fd), 1e-8) + 1e-10


def test_single_term_gradient_only_touches_its_week():
    theta = make_rng(6).normal(size=(2, 3, 2, 4))
    terms = enumerate_terms(random_targets(4, 2), 3)
    batch = terms.take(np.flatnonzero((terms.kind == SINGLE) & (terms.week == 1)))
    _, grad = gradient_minibatch(theta, batch)
    assert np.all(grad[:, [0, 2]] == 0)
    assert np.any(grad[:, 1] != 0)


def test_objective_shift_invariance():
    theta = make_rng(7).normal(size=(3, 2, 2, 5))
    terms = enumerate_terms(random_targets(5, 2), 2)
    shifted = theta + make_rng(8).normal(size=(3, 2, 2, 1)) * 10
    assert evaluate_objective(shifted, terms) == pytest.approx(evaluate_objective(theta, terms), abs=1e-12)


def test_empty_batch_rejected():
    theta = np.zeros((1, 1, 1, 3))
    terms = enumerate_terms(random_targets(3, 1), 1)
    with pytest.raises(ValueError):
        gradient_minibatch(theta, terms.take(np.array([], dtype=int)))


def test_adam_first_step():
    theta = np.zeros((2, 3))
    state = AdamState.zeros_like(theta, lr=0.1)
    theta, state = adam_step(state, theta, np.ones_like(theta))
    assert np.allclose(theta, -0.1, atol=1e-6)
    assert state.step == 1


def test_adam_zero_gradient_is_noop():
    theta = make_rng(0).normal(size=(4,))
    state = AdamState.zeros_like(theta)
    out = theta.copy()
    for _ in range(5):
        out, state = adam_step(state, out, np.zeros_like(out))
    assert np.array_equal(out, theta)


def test_adam_shape_mismatch():
    state = AdamState.zeros_like(np.zeros(3))
    with pytest.raises(ValueError):
        adam_step(state, np.zeros(3), np.zeros(4))


def test_train_zero_epochs_returns_initialization():
    tg = random_targets(4, 2)
    cfg = TrainConfig(num_types=3, epochs=0, init_std=0.001, seed=11)
    params = train(tg, cfg, weeks=2)
    expect = make_rng(11).normal(0.0, 0.001, size=(3, 2, 2, 4))
    assert np.array_equal(params.theta, expect)


def test_train_is_deterministic_and_decreasing():
    theta_true = np.repeat(make_rng(3).normal(size=(2, 1, 2, 5)) * 2, 2, axis=1)
    tg = bundle_from_model(theta_true)
    cfg = TrainConfig(num_types=6, batch_size=16, learning_rate=0.05, epochs=60, seed=2, eval_every=10)
    log_a, log_b = [], []
    a = train(tg, cfg, 2, log=log_a)
    b = train(tg, cfg, 2, log=log_b)
    assert np.array_equal(a.theta, b.theta)
    assert [r["objective"] for r in log_a] == [r["objective"] for r in log_b]
    assert log_a[-1]["objective"] < log_a[0]["objective"]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(num_types=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
