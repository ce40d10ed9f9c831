import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sagin_agents import cot
from sagin_agents.cot import (ContextState, FiniteLatentModel, accuracy, ambiguity_bound,
                              delta_tokens, length_threshold, oracle_posterior_gap,
                              unit_accuracy_cost, update_aot, update_tokens)
from sagin_agents.domain import AOT_SUBTRACTIVE, DomainError

E = math.e


@pytest.mark.parametrize("a, b, r, k, want", [
    (0, 0.0, 5, 200, 0.0),
    (1, 1.0, 5, 200, 0.0),
    (1, 0.0, 3, 200, 600.0),
])
def test_delta_tokens(a, b, r, k, want):
    assert delta_tokens(a, b, r, k) == want


@pytest.mark.parametrize("prev, a, delta, slot, want", [
    (ContextState(100, 0), 1, 50, 0, 0.0),
    (ContextState(100, 0), 1, 50, 3, 150.0),
    (ContextState(100, 0), 0, 50, 3, 0.0),
])
def test_update_tokens(prev, a, delta, slot, want):
    assert update_tokens(prev, a, delta, slot) == want


def test_update_aot_examples():
    prev = ContextState(0, 100)
    assert update_aot(prev, 1, 50, 0.6, slot=0) == 0.0
    assert update_aot(prev, 1, 50, 30, AOT_SUBTRACTIVE) == 120.0
    assert update_aot(prev, 1, 50, 0.6) == pytest.approx(90.0, rel=1e-15)
    # the two modes disagree on the same numbers
    assert update_aot(prev, 1, 50, 0.6, AOT_SUBTRACTIVE) == pytest.approx(149.4)


@given(st.floats(0, 1e4), st.floats(0, 1e4), st.floats(0, 1), st.sampled_from([0, 1]))
def test_aot_nonnegative_and_reset(kappa, delta, vanish, a):
    for mode, v in (("proportional", vanish), (AOT_SUBTRACTIVE, vanish * 500)):
        got = update_aot(ContextState(0, kappa), a, delta, v, mode)
        assert got >= 0
        if a == 0:
            assert got == 0.0
            assert update_tokens(ContextState(kappa, 0), a, delta) == 0.0


@pytest.mark.parametrize("alpha, beta, kappa, want", [
    (0.777, 0.5, 0.0, 0.0),
    (1.0, 1 / E, 3.0, 3.0),
    (0.777, 0.5, 2.0, 1.0771507185901550108),  # mpmath
])
def test_accuracy(alpha, beta, kappa, want):
    assert accuracy(alpha, beta, kappa) == pytest.approx(want, rel=1e-15, abs=0)


@pytest.mark.parametrize("alpha, beta, kappa, want", [
    (1.0, 0.5, 4.0, 0.0),
    (0.5, 1 / E, 1.0, 0.5),
    (0.5, 1 / E, 0.0, 0.5),
])
def test_unit_accuracy_cost(alpha, beta, kappa, want):
    assert unit_accuracy_cost(alpha, beta, kappa) == pytest.approx(want, rel=1e-15)


def test_unit_cost_floor_matches_kappa_one():
    assert unit_accuracy_cost(0.5, 1 / E, 0.0) == unit_accuracy_cost(0.5, 1 / E, 1.0)


def test_zero_beta_is_capped():
    assert cot.log_gain(0.0) == cot.LOG_CAP
    assert math.isfinite(unit_accuracy_cost(0.3, 0.0, 0.0))


@given(st.floats(0.01, 1), st.floats(0.01, 0.99), st.floats(0, 100), st.floats(0.01, 100))
def test_accuracy_monotone_in_kappa(alpha, beta, k, step):
    assert accuracy(alpha, beta, k + step) > accuracy(alpha, beta, k)
    assert unit_accuracy_cost(alpha, beta, k + step) <= unit_accuracy_cost(alpha, beta, k)


@pytest.mark.parametrize("d0, ex, want", [
    (0.3, (0.2, 0.0), 0.0),
    (1 / 3, (1 / 3,), 0.5),
    (0.2, (0.3, 0.25), 0.071428571428571428571),  # mpmath
])
def test_ambiguity_bound(d0, ex, want):
    assert ambiguity_bound(d0, ex) == pytest.approx(want, rel=1e-15, abs=0)


@given(st.floats(0, 0.9), st.lists(st.floats(0.01, 0.9), min_size=1, max_size=4),
       st.floats(1e-6, 0.05), st.integers(0, 4))
def test_ambiguity_bound_increasing(d0, ex, bump, which):
    which = which % (len(ex) + 1)
    base = ambiguity_bound(d0, ex)
    if which == 0:
        bigger = ambiguity_bound(d0 + bump, ex)
    else:
        ex2 = list(ex)
        ex2[which - 1] += bump
        bigger = ambiguity_bound(d0, ex2)
    assert bigger >= base


@pytest.mark.parametrize("eps, sigma, want", [
    (lambda k: 0.0, 0.1, 1),
    (lambda k: 2.0 ** -k, 1 / 8, 3),
    (lambda k: 1 / (k + 1), 0.1, 9),
])
def test_length_threshold(eps, sigma, want):
    assert length_threshold(eps, sigma) == want


def test_length_threshold_scan_oracle():
    eps = lambda k: 1 / (k + 1)
    scan = next(k for k in itertools.count(1) if eps(k) <= 0.1)
    assert length_threshold(eps, 0.1) == scan


def test_length_threshold_gives_up():
    with pytest.raises(cot.SearchLimitError):
        length_threshold(lambda k: 0.4, 0.1, cap=1024)


# ---------------------------------------------------------------------------
# latent-variable oracle

def brute_gap(model, examples, task, continuation):
    """Sum the joint over (c, theta per message) directly."""
    def lik(seq, t):
        return math.prod(model.emission[t, s] for s in seq)

    n_c, n_t = model.n_contexts, model.n_intentions
    num = den = 0.0
    for c in range(n_c):
        for thetas in itertools.product(range(n_t), repeat=len(examples) + 1):
            w = model.prior[c]
            for e, t in zip(examples, thetas):
                w *= model.intent[c, t] * lik(e, t)
            t = thetas[-1]
            w *= model.intent[c, t]
            num += w * lik(tuple(task) + tuple(continuation), t)
            den += w * lik(task, t)
    c = model.true_context
    truth = sum(model.intent[c, t] * lik(tuple(task) + tuple(continuation), t)
                for t in range(n_t)) / sum(model.intent[c, t] * lik(task, t) for t in range(n_t))
    return abs(num / den - truth)


HAND_MODEL = FiniteLatentModel(
    prior=np.array([0.5, 0.5]),
    intent=np.array([[0.8, 0.2], [0.3, 0.7]]),
    emission=np.array([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]]),
)


def test_single_context_gap_is_zero():
    m = FiniteLatentModel(np.array([1.0]), np.array([[0.6, 0.4]]),
                          np.array([[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]]))
    rep = oracle_posterior_gap(m, [(0, 1), (2,)], (0, 0), (1,))
    assert rep.gap == 0.0
    assert rep.lam == 0.0 and rep.upsilon == 0.0


def test_hand_model_within_bound():
    examples, task, cont = [(0, 0, 1), (0, 2, 0)], (0, 0), (1, 0)
    rep = oracle_posterior_gap(HAND_MODEL, examples, task, cont)
    assert rep.gap == pytest.approx(brute_gap(HAND_MODEL, examples, task, cont), rel=1e-12)
    assert rep.holds
    assert 0 < rep.gap <= rep.bound


def test_ambiguity_of_symmetric_model():
    m = FiniteLatentModel(np.array([0.5, 0.5]), np.array([[1.0, 0.0], [0.0, 1.0]]),
                          np.array([[0.5, 0.5], [0.5, 0.5]]))
    assert m.ambiguity((0, 1)) == pytest.approx(0.5, rel=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_factorised_gap_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    m = cot.random_latent_model(rng)
    examples = [cot.sample_message(m, rng, m.true_intention, int(rng.integers(1, 4)))
                for _ in range(int(rng.integers(1, 3)))]
    task = cot.sample_message(m, rng, m.true_intention, 2)
    cont = cot.sample_message(m, rng, m.true_intention, 1)
    rep = oracle_posterior_gap(m, examples, task, cont)
    assert rep.gap == pytest.approx(brute_gap(m, examples, task, cont), rel=1e-9, abs=1e-15)


def test_latent_model_text_round_trip(tmp_path):
    path = tmp_path / "model.txt"
    path.write_text(cot.dumps_latent_model(HAND_MODEL))
    again = cot.load_latent_model(path)
    for name in ("prior", "intent", "emission"):
        assert np.array_equal(getattr(again, name), getattr(HAND_MODEL, name))


def test_rows_must_normalise():
    with pytest.raises(DomainError):
        FiniteLatentModel(np.array([0.5, 0.4]), np.eye(2), np.eye(2))
