import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ratiomatch import tensor as T
from ratiomatch.energy import (DimensionError, IsingEnergy, LinearEnergy, MlpEnergy, all_flips,
                               cyclic_lattice_adjacency, flip, model_from_architecture, ring_adjacency)

from conftest import random_bits, rel_err


def brute_ising_energy(J, b, x, encoding="spin"):
    s = 2 * np.asarray(x, float) - 1 if encoding == "spin" else np.asarray(x, float)
    return -(s @ J @ s) - b @ s


def test_ring_energy_all_ones():
    m = IsingEnergy(4, J=0.25 * ring_adjacency(4), learnable=False)
    assert m.energy(np.ones((1, 4)))[0] == pytest.approx(-2.0, abs=1e-15)


def test_ising_global_flip_symmetry(rng):
    m = IsingEnergy.lattice(4, 0.3)
    m.params["J_upper"] = rng.normal(size=m.params["J_upper"].shape)
    X = random_bits(rng, 20, 16)
    np.testing.assert_allclose(m.energy(X), m.energy(1 - X), atol=1e-12)


def test_mlp_zero_output_weights_gives_bias():
    m = MlpEnergy(6, 8, 2)
    m.params["W_out"] = np.zeros((1, 8))
    m.params["b_out"] = np.array([0.7])
    X = np.array(list(itertools.product([0, 1], repeat=6)), float)
    np.testing.assert_array_equal(m.energy(X), 0.7)


def test_energy_dimension_mismatch():
    with pytest.raises(DimensionError):
        MlpEnergy(4, 8, 1).energy(np.zeros((2, 5)))
    with pytest.raises(DimensionError):
        IsingEnergy.lattice(3, 0.1).energy(np.zeros((2, 8)))


def test_non_binary_input_rejected():
    with pytest.raises(ValueError):
        LinearEnergy([1.0, 2.0]).energy(np.array([[0.5, 1.0]]))


def test_lattice_adjacency():
    A = cyclic_lattice_adjacency(5)
    assert A.shape == (25, 25)
    np.testing.assert_array_equal(A, A.T)
    np.testing.assert_array_equal(A.sum(axis=1), 4)
    assert np.all(np.diag(A) == 0)


def test_ising_invariants():
    m = IsingEnergy.lattice(4, 0.25)
    J = m.J
    np.testing.assert_array_equal(J, J.T)
    assert np.all(np.diag(J) == 0)
    np.testing.assert_array_equal(J, 0.25 * cyclic_lattice_adjacency(4))
    with pytest.raises(ValueError):
        IsingEnergy(3, J=np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0.0]]))


@pytest.mark.parametrize("encoding", ["spin", "binary"])
def test_ising_energy_matches_brute_force(rng, encoding):
    J = rng.normal(size=(9, 9))
    J = np.triu(J, 1)
    J = J + J.T
    b = rng.normal(size=9)
    m = IsingEnergy(9, J=J, b=b, encoding=encoding)
    X = random_bits(rng, 30, 9)
    np.testing.assert_allclose(m.energy(X), [brute_ising_energy(J, b, x, encoding) for x in X], atol=1e-12)


def test_linear_gradient_is_weight(rng):
    w = rng.normal(size=7)
    m = LinearEnergy(w, 0.3)
    np.testing.assert_allclose(m.grad_input(random_bits(rng, 5, 7)), np.tile(w, (5, 1)), atol=1e-15)


def test_mlp_grad_input_matches_finite_differences(rng):
    m = MlpEnergy(6, 16, 3, rng=rng)
    for x in random_bits(rng, 5, 6):
        g = m.grad_input(x[None])[0]
        fd = T.finite_diff_grad(lambda v: float(m.energy_node(v[None]).data[0]), x)
        assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("encoding", ["spin", "binary"])
def test_ising_grad_input_analytic(rng, encoding):
    m = IsingEnergy.lattice(3, 0.25, encoding=encoding)
    m.params["b"] = rng.normal(size=9)
    X = random_bits(rng, 4, 9)
    G = m.grad_input(X)
    for x, g in zip(X, G):
        fd = T.finite_diff_grad(lambda v: float(m.energy_node(v[None]).data[0]), x)
        np.testing.assert_allclose(g, fd, atol=1e-7)
    if encoding == "spin":
        S = 2 * X - 1
        np.testing.assert_allclose(G, 2 * (-(m.J + m.J.T) @ S.T).T - 2 * m.b, atol=1e-12)


def test_neighbor_energies_linear_example():
    m = LinearEnergy([1.0, 2.0])
    np.testing.assert_allclose(m.neighbor_energies([0, 0]), [1.0, 2.0])


def test_neighbor_energies_constant():
    m = LinearEnergy.constant(5, 1.5)
    np.testing.assert_array_equal(m.neighbor_energies(np.ones(5)), 1.5)


def test_ising_delta_path_matches_brute_force(rng):
    m = IsingEnergy.lattice(4, 0.25)
    m.params["b"] = rng.normal(size=16)
    for x in random_bits(rng, 50, 16):
        direct = m.energy(all_flips(x))
        np.testing.assert_allclose(m.neighbor_energies(x), direct, atol=1e-10)


@pytest.mark.parametrize("make", [
    lambda r: MlpEnergy(8, 16, 2, rng=r),
    lambda r: IsingEnergy(8, J=(lambda A: A + A.T)(np.triu(r.normal(size=(8, 8)), 1)), b=r.normal(size=8)),
    lambda r: IsingEnergy(8, J=(lambda A: A + A.T)(np.triu(r.normal(size=(8, 8)), 1)), encoding="binary"),
    lambda r: LinearEnergy(r.normal(size=8), 0.1),
])
def test_flip_deltas_and_site_gap_agree_with_direct_energies(rng, make):
    m = make(rng)
    X = random_bits(rng, 6, 8)
    cols = rng.integers(0, 8, size=(6, 3))
    D = m.flip_deltas(X, cols)
    for b in range(6):
        for j in range(3):
            assert D[b, j] == pytest.approx(m.energy(X[b])[0] - m.energy(flip(X[b], cols[b, j]))[0], abs=1e-10)
        np.testing.assert_allclose(m.neighbor_energies(X[b]), m.energy(all_flips(X[b])), atol=1e-10)
    for i in range(8):
        np.testing.assert_allclose(m.site_gap(X, i), m.energy(flip(X, i)) - m.energy(X), atol=1e-10)


def test_mlp_fused_flip_gradients_match_generic_path(rng):
    from ratiomatch.energy import EnergyModel
    m = MlpEnergy(10, 12, 2, rng=rng)
    X = random_bits(rng, 5, 10)
    cols = rng.integers(0, 10, size=(5, 4))
    fused = m.flip_deltas_node(X, cols)
    generic = EnergyModel.flip_deltas_node(m, X, cols)
    np.testing.assert_allclose(fused.data, generic.data, atol=1e-12)
    w = rng.normal(size=fused.shape)
    g1 = T.backward(T.sum_(T.mul(fused, w)), m.params)
    g2 = T.backward(T.sum_(T.mul(generic, w)), m.params)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=20), st.data())
def test_flip_is_an_involution(bits, data):
    x = np.array(bits)
    i = data.draw(st.integers(0, len(bits) - 1))
    y = flip(x, i)
    assert np.count_nonzero(y != x) == 1
    np.testing.assert_array_equal(flip(y, i), x)


def test_architecture_roundtrip(rng):
    for m in (MlpEnergy(5, 9, 2, rng=rng), IsingEnergy.lattice(3, 0.25, "binary"), LinearEnergy([1.0, 2.0])):
        m2 = model_from_architecture(m.architecture(), params=m.params.copy())
        X = random_bits(rng, 4, m.d)
        np.testing.assert_array_equal(m.energy(X), m2.energy(X))
        assert m2.architecture() == m.architecture()
