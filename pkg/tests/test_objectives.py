import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ratiomatch import objectives as O
from ratiomatch import tensor as T
from ratiomatch.energy import LinearEnergy, MlpEnergy
from ratiomatch.objectives import EstimatorKind, EstimatorSpec, ProposalDistribution

from conftest import random_bits

LIN = LinearEnergy([1.0, 2.0])
X00 = np.array([0.0, 0.0])
FULL_LIN = math.exp(-2) + math.exp(-4)


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def brute_full(model, x):
    e = model.energy(x)[0]
    return sum(math.exp(2 * (e - en)) for en in model.neighbor_energies(x))


def enumerated_basic(model, x, probs):
    """Expectation of the single-draw basic estimator under ``probs``."""
    return sum(p * O.is_estimate_basic(model, x, ProposalDistribution(x, probs), [i]).value
               for i, p in enumerate(probs))


# ---------------------------------------------------------------- full objectives

def test_rm_full_linear_example():
    assert O.rm_full_loss(LIN, X00).value == pytest.approx(FULL_LIN, abs=1e-15)


def test_rm_full_constant_is_d():
    assert O.rm_full_loss(LinearEnergy.constant(7, 3.0), np.ones(7)).value == 7.0


def test_rm_full_matches_brute_force(rng):
    for _ in range(5):
        m = MlpEnergy(8, 16, 2, rng=rng)
        x = random_bits(rng, 1, 8)[0]
        assert abs(O.rm_full_loss(m, x).value - brute_full(m, x)) < 1e-10


def test_rm_g_examples():
    assert O.rm_g_loss(LinearEnergy.constant(6), np.zeros(6)).value == pytest.approx(6 / 4)
    assert O.rm_g_loss(LIN, X00).value == pytest.approx(sig(-1) ** 2 + sig(-2) ** 2, abs=1e-15)


def test_rm_g_range(rng):
    for _ in range(20):
        m = MlpEnergy(6, 8, 1, rng=rng)
        m.params["W_out"] = 50 * m.params["W_out"].data
        v = O.rm_g_loss(m, random_bits(rng, 1, 6)[0]).value
        assert 0 <= v <= 6


def test_clamp_events_are_counted():
    m = LinearEnergy([40.0, -40.0, 0.0])
    lv = O.rm_full_loss(m, np.array([1.0, 1.0, 0.0]))
    assert lv.clamp_events == 2
    assert lv.value == pytest.approx(math.exp(30) + math.exp(-30) + 1.0)


# ---------------------------------------------------------------- proposals

def test_exact_optimal_linear_example():
    p = O.exact_optimal_proposal(LIN, X00).probs
    np.testing.assert_allclose(p, [1 / (1 + math.exp(-2)), math.exp(-2) / (1 + math.exp(-2))], atol=1e-15)


def test_proposals_uniform_for_constant():
    m = LinearEnergy.constant(5, -2.0)
    np.testing.assert_allclose(O.exact_optimal_proposal(m, np.zeros(5)).probs, 0.2)
    np.testing.assert_allclose(O.gradient_guided_proposal(m, np.zeros(5)).probs, 0.2)


def test_exact_proposal_shift_invariant(rng):
    m = MlpEnergy(6, 8, 1, rng=rng)
    x = random_bits(rng, 1, 6)[0]
    p1 = O.exact_optimal_proposal(m, x).probs
    m.params["b_out"] = m.params["b_out"].data + 123.0
    np.testing.assert_allclose(O.exact_optimal_proposal(m, x).probs, p1, atol=1e-12)


def test_taylor_delta_examples(rng):
    np.testing.assert_array_equal(O.taylor_delta(LIN, X00), [-1.0, -2.0])
    m = LinearEnergy(rng.normal(size=9), 0.5)
    x = random_bits(rng, 1, 9)[0]
    true = m.energy(x)[0] - m.neighbor_energies(x)
    np.testing.assert_allclose(O.taylor_delta(m, x), true, atol=1e-12)


def test_gradient_guided_equals_exact_for_linear(rng):
    np.testing.assert_allclose(O.gradient_guided_proposal(LIN, X00).probs, [0.880797, 0.119203], atol=1e-6)
    for _ in range(20):
        m = LinearEnergy(rng.normal(size=12), 0.0)
        x = random_bits(rng, 1, 12)[0]
        np.testing.assert_allclose(O.gradient_guided_proposal(m, x).probs,
                                   O.exact_optimal_proposal(m, x).probs, atol=1e-12)


def test_proposal_invariants():
    with pytest.raises(ValueError):
        ProposalDistribution(np.zeros(2), [0.7, 0.7])
    with pytest.raises(ValueError):
        ProposalDistribution(np.zeros(2), [1.5, -0.5])
    with pytest.raises(ValueError):
        ProposalDistribution(np.zeros(3), [0.5, 0.5])


# ---------------------------------------------------------------- estimators

def test_basic_stratified_uniform_equals_full(rng):
    m = MlpEnergy(7, 8, 2, rng=rng)
    x = random_bits(rng, 1, 7)[0]
    uni = ProposalDistribution(x, np.full(7, 1 / 7))
    assert O.is_estimate_basic(m, x, uni, np.arange(7)).value == pytest.approx(O.rm_full_loss(m, x).value, rel=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.99))
def test_basic_expectation_linear_example(p0):
    assert enumerated_basic(LIN, X00, np.array([p0, 1 - p0])) == pytest.approx(FULL_LIN, abs=1e-12)


def test_basic_constant_energy_uniform_proposal():
    m = LinearEnergy.constant(5)
    uni = ProposalDistribution(np.zeros(5), np.full(5, 0.2))
    for idx in ([0], [4, 4, 1], [2, 3]):
        assert O.is_estimate_basic(m, np.zeros(5), uni, idx).value == pytest.approx(5.0)


def test_basic_rejects_zero_mass_index():
    p = ProposalDistribution(X00, [1.0, 0.0])
    with pytest.raises(ValueError):
        O.is_estimate_basic(LIN, X00, p, [1])


def test_advanced_examples():
    assert O.is_estimate_advanced(LinearEnergy.constant(6), np.zeros(6), [0, 1, 2, 2]).value == 4.0
    # flip of the first bit (index 0) has delta -1
    assert O.is_estimate_advanced(LIN, X00, [0]).value == pytest.approx(math.exp(-2))
    assert O.is_estimate_advanced(LIN, X00, [0, 0]).value == pytest.approx(2 * math.exp(-2))


def test_rmwrand_examples(rng):
    assert O.rmwrand_estimate(LinearEnergy.constant(6), np.zeros(6), [3, 3]).value == 6.0
    m = MlpEnergy(5, 8, 1, rng=rng)
    x = random_bits(rng, 1, 5)[0]
    assert O.rmwrand_estimate(m, x, np.arange(5)).value == pytest.approx(O.rm_full_loss(m, x).value, rel=1e-13)
    expect = sum(0.5 * O.rmwrand_estimate(LIN, X00, [i]).value for i in range(2))
    assert expect == pytest.approx(FULL_LIN, abs=1e-15)


def test_unbiasedness_by_enumeration(rng):
    for _ in range(10):
        d = int(rng.integers(2, 11))
        m = MlpEnergy(d, 8, 2, rng=rng)
        x = random_bits(rng, 1, d)[0]
        full = O.rm_full_loss(m, x).value
        for probs in (rng.dirichlet(np.ones(d)), O.gradient_guided_proposal(m, x).probs,
                      O.exact_optimal_proposal(m, x).probs, np.full(d, 1 / d)):
            assert abs(enumerated_basic(m, x, probs) - full) < 1e-9


def test_optimal_proposal_has_zero_variance(rng):
    m = MlpEnergy(6, 8, 1, rng=rng)
    x = random_bits(rng, 1, 6)[0]
    opt = O.exact_optimal_proposal(m, x)
    vals = [O.is_estimate_basic(m, x, opt, [i]).value for i in range(6)]
    np.testing.assert_allclose(vals, O.rm_full_loss(m, x).value, rtol=1e-12)


def test_losses_are_nonnegative(rng):
    m = MlpEnergy(8, 8, 1, rng=rng)
    X = random_bits(rng, 16, 8)
    for kind in EstimatorKind:
        assert O.batch_loss(m, X, EstimatorSpec(kind, s=3), rng=rng).value >= 0


def test_proposal_is_detached(rng):
    """Gradients of the basic estimator equal those with the proposal treated as a constant."""
    m = MlpEnergy(6, 8, 1, rng=rng)
    x = random_bits(rng, 1, 6)[0]
    p = O.gradient_guided_proposal(m, x)
    idx = [1, 4, 4]
    g = T.backward(O.is_estimate_basic(m, x, p, idx).node, m.params)
    terms = O.sampled_terms(m, x[None], np.array([idx]))[0]
    manual = T.sum_(T.mul(terms, 1.0 / (3 * p.probs[idx])))
    g2 = T.backward(manual, m.params)
    for k in g:
        np.testing.assert_allclose(g[k], g2[k], rtol=1e-13)


# ---------------------------------------------------------------- batches

def test_batch_identical_rows_full(rng):
    m = MlpEnergy(5, 8, 1, rng=rng)
    x = random_bits(rng, 1, 5)[0]
    lv = O.batch_loss(m, np.tile(x, (4, 1)), EstimatorSpec("rm-full"))
    assert lv.value == pytest.approx(O.rm_full_loss(m, x).value, rel=1e-13)


@pytest.mark.parametrize("kind", ["rmwggis-basic", "rmwggis-adv", "rmwrand"])
def test_batch_mean_matches_per_sample(rng, kind):
    m = MlpEnergy(6, 8, 2, rng=rng)
    X = random_bits(rng, 5, 6)
    lv = O.batch_loss(m, X, EstimatorSpec(kind, s=4), rng=rng)
    per = []
    for b in range(5):
        if kind == "rmwggis-basic":
            v = O.is_estimate_basic(m, X[b], O.gradient_guided_proposal(m, X[b]), lv.indices[b])
        elif kind == "rmwggis-adv":
            v = O.is_estimate_advanced(m, X[b], lv.indices[b])
        else:
            v = O.rmwrand_estimate(m, X[b], lv.indices[b])
        per.append(v.value)
    assert lv.value == pytest.approx(np.mean(per), rel=1e-12)
    lv2 = O.batch_loss(m, X, EstimatorSpec(kind, s=4), indices=lv.indices)
    assert lv2.value == lv.value


def test_batch_errors(rng):
    m = MlpEnergy(4, 8, 1, rng=rng)
    with pytest.raises(ValueError):
        O.batch_loss(m, np.zeros((0, 4)), EstimatorSpec("rm-full"))
    with pytest.raises(ValueError):
        O.batch_loss(m, np.zeros((2, 4)), EstimatorSpec("rmwggis-adv", s=5), rng=rng)
    with pytest.raises(ValueError):
        EstimatorSpec("nope")
