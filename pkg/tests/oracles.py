"""Exhaustive-enumeration oracles shared by tests."""
import itertools

import numpy as np


def all_states(d):
    return np.array(list(itertools.product([0, 1], repeat=d)), dtype=np.float64)


def boltzmann(model):
    X = all_states(model.d)
    e = model.energy(X)
    w = np.exp(-(e - e.min()))
    return X, w / w.sum()


def state_index(X):
    X = np.asarray(X, dtype=np.int64)
    d = X.shape[1]
    return X @ (1 << np.arange(d - 1, -1, -1))


def total_variation(samples, probs):
    counts = np.bincount(state_index(samples), minlength=probs.size)
    return 0.5 * np.abs(counts / counts.sum() - probs).sum()
