import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bimodal import errors
from bimodal.nn import OptimizerState, accuracy
from bimodal.rbm import (
    FUSION_INPUT_DIM,
    FUSION_TOPOLOGY,
    SPEAKER_TOPOLOGY,
    DbnStack,
    Rbm,
    cd1_expected_update,
    cd1_statistics,
    cd1_update,
    finetune,
    hidden_given_visible,
    pretrain_stack,
    rbm_exact_gradient,
    rbm_exact_loglik,
    visible_log_probs,
)

from oracles import central_difference, rbm_joint_table


def _random_rbm(rng, v=3, h=2, scale=1.0):
    return Rbm(rng.normal(0, scale, (v, h)), rng.normal(0, scale, v), rng.normal(0, scale, h))


def _flat(parts):
    return np.concatenate([np.ravel(p) for p in parts])


def test_topology_constants():
    assert SPEAKER_TOPOLOGY == (2048, 2048, 2048, 2048)
    assert FUSION_INPUT_DIM == 3148 and FUSION_TOPOLOGY == (3000, 3000, 3000, 3000)


def test_conditional_examples():
    rbm = Rbm(np.zeros((3, 2)), np.zeros(3), np.zeros(2))
    np.testing.assert_array_equal(hidden_given_visible(rbm, np.ones(3)), [0.5, 0.5])
    one = Rbm(np.array([[1.7]]), np.zeros(1), np.array([-0.4]))
    assert hidden_given_visible(one, np.array([1.0]))[0] == pytest.approx(1 / (1 + math.exp(-1.3)))
    p = hidden_given_visible(_random_rbm(np.random.default_rng(0), 5, 4, 3.0),
                             np.random.default_rng(1).integers(0, 2, (20, 5)))
    assert np.all((p > 0) & (p < 1))


def test_conditionals_match_the_joint():
    rng = np.random.default_rng(2)
    rbm = _random_rbm(rng)
    table = rbm_joint_table(rbm.W, rbm.b, rbm.c)
    for v in itertools.product((0, 1), repeat=3):
        hs = list(itertools.product((0, 1), repeat=2))
        z = sum(table[v, h] for h in hs)
        for j in range(2):
            marg = sum(table[v, h] for h in hs if h[j] == 1) / z
            assert hidden_given_visible(rbm, np.array(v, float))[j] == pytest.approx(marg, abs=1e-12)


def test_uniform_rbm_loglik():
    rbm = Rbm(np.zeros((2, 3)), np.zeros(2), np.zeros(3))
    assert rbm_exact_loglik(rbm, [[0, 1]]) == pytest.approx(-math.log(4))
    _, logp = visible_log_probs(rbm)
    np.testing.assert_allclose(np.exp(logp), 0.25)


@given(st.integers(0, 2 ** 20))
def test_enumerated_probabilities_normalized(seed):
    r = np.random.default_rng(seed)
    rbm = _random_rbm(r, int(r.integers(1, 6)), int(r.integers(1, 5)), 2.0)
    _, logp = visible_log_probs(rbm)
    assert abs(np.exp(logp).sum() - 1.0) < 1e-12


def test_loglik_matches_joint_table_and_hidden_permutation():
    rng = np.random.default_rng(3)
    rbm = _random_rbm(rng, 3, 3)
    data = rng.integers(0, 2, (5, 3)).astype(float)
    table = rbm_joint_table(rbm.W, rbm.b, rbm.c)
    z = sum(table.values())
    ref = sum(math.log(sum(p for (v, _), p in table.items() if v == tuple(int(x) for x in row)) / z)
              for row in data)
    assert rbm_exact_loglik(rbm, data) == pytest.approx(ref, rel=1e-12)
    perm = [2, 0, 1]
    swapped = Rbm(rbm.W[:, perm], rbm.b, rbm.c[perm])
    assert rbm_exact_loglik(swapped, data) == pytest.approx(rbm_exact_loglik(rbm, data), rel=1e-12)


def test_enumeration_limits():
    with pytest.raises(errors.ParameterError):
        rbm_exact_loglik(Rbm.init(15, 6), np.zeros((1, 15)))
    with pytest.raises(errors.ParameterError):
        rbm_exact_loglik(Rbm.init(2, 2, "gaussian"), np.zeros((1, 2)))


def test_exact_gradient_is_loglik_derivative():
    rng = np.random.default_rng(4)
    rbm = _random_rbm(rng)
    data = rng.integers(0, 2, (6, 3)).astype(float)
    numeric = central_difference(lambda: rbm_exact_loglik(rbm, data) / 6, [rbm.W, rbm.b, rbm.c])
    for g, n in zip(rbm_exact_gradient(rbm, data), numeric):
        np.testing.assert_allclose(g, n, atol=1e-8)


def test_cd1_expectation_matches_sampling():
    rng = np.random.default_rng(5)
    rbm = _random_rbm(rng)
    data = rng.integers(0, 2, (4, 3)).astype(float)
    exact = _flat(cd1_expected_update(rbm, data))
    draws = np.mean([_flat(cd1_statistics(rbm, data, rng)) for _ in range(20000)], axis=0)
    np.testing.assert_allclose(draws, exact, atol=0.01)


def test_cd1_direction_agrees_with_exact_gradient():
    agree = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        rbm = _random_rbm(r)
        data = r.integers(0, 2, (10, 3)).astype(float)
        agree += _flat(cd1_expected_update(rbm, data)) @ _flat(rbm_exact_gradient(rbm, data)) > 0
    assert agree >= 90


def test_cd1_rate_zero_and_determinism():
    rng = np.random.default_rng(6)
    rbm = _random_rbm(rng)
    batch = rng.integers(0, 2, (8, 3)).astype(float)
    same = cd1_update(rbm, batch, 0.0, 1)
    np.testing.assert_array_equal(same.W, rbm.W)
    np.testing.assert_array_equal(same.b, rbm.b)
    a, b = cd1_update(rbm, batch, 0.1, 7), cd1_update(rbm, batch, 0.1, 7)
    np.testing.assert_array_equal(a.W, b.W)


def test_cd1_saturated_reconstruction_gives_no_update():
    # hidden unit j copies visible j; saturated weights make the Gibbs step exact
    big = 40.0
    rbm = Rbm(big * np.eye(2) * 2, -big * np.ones(2), -big * np.ones(2))
    batch = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    dw, db, dc = cd1_statistics(rbm, batch, np.random.default_rng(0))
    assert max(np.abs(dw).max(), np.abs(db).max(), np.abs(dc).max()) < 1e-12


def _toy(seed, n=200, d=6):
    r = np.random.default_rng(seed)
    centers = r.normal(0, 2, (2, d))
    labels = r.integers(0, 2, n)
    return centers[labels] + r.normal(0, 1, (n, d)), labels


def test_pretrain_zero_epochs_keeps_init():
    x, _ = _toy(0)
    a = pretrain_stack(x, (5, 4), epochs=0, seed=3)
    b = pretrain_stack(x, (5, 4), epochs=0, seed=3)
    np.testing.assert_array_equal(a.rbms[0].W, b.rbms[0].W)
    assert a.rbms[0].visible_type == "gaussian" and a.rbms[1].visible_type == "bernoulli"
    assert a.topology == [6, 5, 4]
    assert np.all(a.rbms[0].b == 0)


def test_pretrain_reduces_reconstruction_error():
    ok = 0
    for seed in range(20):
        x, _ = _toy(seed)
        errs = []
        pretrain_stack(x, (8, 6), epochs=10, rate=0.01, seed=seed, layer_errors=errs)
        ok += all(after <= before for before, after in errs)
    assert ok >= 18


def test_pretrain_is_deterministic_and_feeds_probabilities():
    x, _ = _toy(1)
    a = pretrain_stack(x, (5, 3), epochs=2, seed=9)
    b = pretrain_stack(x, (5, 3), epochs=2, seed=9)
    for r1, r2 in zip(a.rbms, b.rbms):
        np.testing.assert_array_equal(r1.W, r2.W)
    top = a.transform(x)
    assert np.all((top > 0) & (top < 1))
    assert not np.all(np.isin(top, [0.0, 1.0]))


def _perceptron_separable(x, labels, epochs=1000):
    xa = np.hstack([x, np.ones((len(x), 1))])
    s = np.where(labels == 1, 1.0, -1.0)
    w = np.zeros(xa.shape[1])
    for _ in range(epochs):
        wrong = s * (xa @ w) <= 0
        if not wrong.any():
            return True
        i = np.flatnonzero(wrong)[0]
        w += s[i] * xa[i]
    return False


def test_finetune_separable_toy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(100, 2))
    labels = (x[:, 0] - 0.5 * x[:, 1] > 0.2).astype(int)
    x = x + np.where(labels[:, None] == 1, 0.3, -0.3) * np.array([1.0, -0.5])
    assert _perceptron_separable(x, labels)
    stack = pretrain_stack(x, (8,), epochs=5, seed=0)
    curve = []
    tuned = finetune(stack, x, labels, OptimizerState("sgd", rate=0.5), epochs=500, batch_size=10,
                     seed=0, curve=curve)
    assert accuracy(tuned.to_network(), tuned.standardize(x), labels) == 1.0
    losses = np.array([c[1] for c in curve[:30]])
    avg = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(avg) < 0)


def test_finetune_rate_zero_changes_nothing():
    x, labels = _toy(2, 50)
    stack = pretrain_stack(x, (4,), epochs=1, seed=0)
    head_seeded = finetune(stack, x, labels, OptimizerState("sgd", rate=0.0), epochs=0, seed=1)
    tuned = finetune(head_seeded, x, labels, OptimizerState("sgd", rate=0.0), epochs=5, seed=1)
    for a, b in zip(head_seeded.to_network().params(), tuned.to_network().params()):
        np.testing.assert_array_equal(a, b)


def test_finetune_label_width_checked():
    x, labels = _toy(3, 30)
    stack = finetune(pretrain_stack(x, (4,), epochs=0), x, labels, epochs=0)
    with pytest.raises(errors.ParameterError):
        finetune(stack, x, np.eye(3)[labels], epochs=1)


def test_dbn_round_trip_unrolls_identically():
    x, labels = _toy(4, 40)
    stack = finetune(pretrain_stack(x, (5, 4), epochs=1), x, labels, epochs=2)
    again = DbnStack.from_state(*stack.to_state())
    np.testing.assert_array_equal(again.predict_proba(x), stack.predict_proba(x))
    with pytest.raises(errors.ParameterError):
        DbnStack([Rbm.init(3, 2), Rbm.init(3, 2)])
