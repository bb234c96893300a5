"""Seeded randomness, categorical draws and a systematic-scan Gibbs sampler."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import stable_sigmoid


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator for ``(seed, stream)``; distinct streams are independent by construction."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(stream),))))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def categorical_rows(probs: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` i.i.d. draws per row of ``probs`` (rows must already be normalised).

    Inverse-CDF with half-open intervals ``[cdf[i-1], cdf[i])``: an entry with zero
    mass has an empty interval and can never be returned.
    """
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random((probs.shape[0], count))
    return (u[:, :, None] >= cdf[:, None, :]).sum(axis=2).astype(np.int64)


def categorical_sample(probs, count: int, rng: np.random.Generator) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError("probs must be a non-empty vector")
    if count < 1:
        raise ValueError("count must be >= 1")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probs must be non-negative and sum to 1")
    return categorical_rows(probs[None, :], count, rng)[0]


@dataclass
class ChainState:
    """One or more Gibbs chains; ``current`` is ``(chains, d)`` of 0/1."""

    current: np.ndarray
    sweep_count: int = 0


def gibbs_sweep(model, state: ChainState, rng: np.random.Generator) -> ChainState:
    """One systematic scan over sites 0..d-1, resampling each bit from its conditional."""
    X = np.array(state.current, dtype=np.float64, copy=True)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.d:
        raise ValueError(f"chain dimension {X.shape[1]} != model dimension {model.d}")
    u = rng.random(X.shape)
    scan = getattr(model, "gibbs_scan", None)
    if scan is not None:
        X = scan(X, u)
    else:
        for i in range(model.d):
            gap = model.site_gap(X, i)  # E(x_{-i}) - E(x)
            if not np.isfinite(gap).all():
                raise FloatingPointError("non-finite energy during Gibbs sweep")
            # logit of x_i = 1 is E(x_i=0) - E(x_i=1)
            p1 = stable_sigmoid(gap * (2.0 * X[:, i] - 1.0))
            X[:, i] = (u[:, i] < p1).astype(np.float64)
    out = X.astype(np.uint8)
    if np.ndim(state.current) == 1:
        out = out[0]
    return ChainState(out, state.sweep_count + 1)


def gibbs_sample_set(model, n: int, chains: int = 100, burn_in: int = 1000, thin: int = 10,
                     rng: np.random.Generator | None = None, init: np.ndarray | None = None) -> np.ndarray:
    """Collect ``n`` states from ``chains`` parallel chains.

    Chains start uniformly at random, run ``burn_in`` sweeps, then every chain's
    state is collected (in chain order) every ``thin`` sweeps until ``n`` rows exist.
    """
    if min(n, chains, thin) < 1 or burn_in < 0:
        raise ValueError("n, chains and thin must be positive; burn_in non-negative")
    rng = make_rng(0) if rng is None else rng
    X0 = rng.integers(0, 2, size=(chains, model.d), dtype=np.uint8) if init is None else np.asarray(init, np.uint8)
    state = ChainState(X0)
    for _ in range(burn_in):
        state = gibbs_sweep(model, state, rng)
    out = []
    collected = 0
    while True:
        take = min(chains, n - collected)
        out.append(state.current[:take].copy())
        collected += take
        if collected >= n:
            break
        for _ in range(thin):
            state = gibbs_sweep(model, state, rng)
    return np.concatenate(out, axis=0)


def steps_to_sweeps(steps: int, d: int) -> int:
    """Single-site update budget expressed as whole sweeps (rounded up)."""
    return max(1, math.ceil(steps / d))
