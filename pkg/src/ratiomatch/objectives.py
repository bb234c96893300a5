"""Ratio-matching losses and their importance-sampled estimators.

Throughout, ``delta_i = E(x) - E(x_{-i})`` and a ratio term is
``[exp(delta_i)]^2 = exp(2 delta_i)``. The full objective of one point is the sum
of its d ratio terms. Proposal distributions live on the d flip neighbours and
are always computed off the tape, so gradients only reach the parameters through
the sampled ratio terms.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .energy import check_bits
from .samplers import categorical_rows
from .tensor import Tensor


class EstimatorKind(str, Enum):
    RM_FULL = "rm-full"
    RM_G_FULL = "rm-g-full"
    RMWGGIS_BASIC = "rmwggis-basic"
    RMWGGIS_ADVANCED = "rmwggis-adv"
    RMWRAND = "rmwrand"

    @property
    def sampled(self) -> bool:
        return self not in (EstimatorKind.RM_FULL, EstimatorKind.RM_G_FULL)


@dataclass(frozen=True)
class EstimatorSpec:
    kind: EstimatorKind = EstimatorKind.RMWGGIS_ADVANCED
    s: int = 10
    exponent_clamp: float = 30.0
    # sampled kinds only: "ratio" uses exp(2 delta), "g" uses sigmoid(delta)^2
    term: str = "ratio"

    def __post_init__(self):
        object.__setattr__(self, "kind", EstimatorKind(self.kind))
        if self.term not in ("ratio", "g"):
            raise ValueError("term must be 'ratio' or 'g'")
        if self.exponent_clamp <= 0:
            raise ValueError("exponent_clamp must be positive")

    def check(self, d: int):
        if self.kind.sampled and not 1 <= self.s <= d:
            raise ValueError(f"s must lie in [1, {d}] for {self.kind.value}, got {self.s}")


@dataclass
class ProposalDistribution:
    anchor: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (np.asarray(self.anchor).size,):
            raise ValueError("proposal must have one weight per flip neighbour")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("proposal weights must be non-negative and sum to 1")


@dataclass
class LossValue:
    node: Tensor
    terms: np.ndarray
    clamp_events: int = 0
    indices: np.ndarray | None = field(default=None, repr=False)

    @property
    def value(self) -> float:
        return self.node.item()


# ---------------------------------------------------------------- term helpers

def _ratio_terms(deltas: Tensor, clamp: float):
    arg = T.mul(deltas, 2.0)
    events = int(np.count_nonzero(np.abs(arg.data) > clamp))
    return T.exp(T.clip(arg, -clamp, clamp)), events


def _g_terms(deltas: Tensor):
    # g(p(x)/p(x_{-i})) = 1 / (1 + exp(-delta)) = sigmoid(delta)
    return T.square(T.sigmoid(deltas))


def _terms(deltas: Tensor, term: str, clamp: float):
    if term == "g":
        return _g_terms(deltas), 0
    return _ratio_terms(deltas, clamp)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _all_cols(B: int, d: int) -> np.ndarray:
    return np.broadcast_to(np.arange(d), (B, d))


def _single(model, x) -> np.ndarray:
    X = check_bits(x, model.d)
    if X.shape[0] != 1:
        raise ValueError("expected a single point")
    return X


# ---------------------------------------------------------------- batched core

def full_terms(model, X: np.ndarray, term: str = "ratio", clamp: float = 30.0):
    """``(B, d)`` node of every flip term, plus the clamp-event count."""
    B, d = X.shape
    deltas = model.flip_deltas_node(X, _all_cols(B, d))
    return _terms(deltas, term, clamp)


def exact_optimal_probs(model, X: np.ndarray) -> np.ndarray:
    B, d = X.shape
    deltas = model.flip_deltas_node(X, _all_cols(B, d)).data
    return _softmax_rows(2.0 * deltas)


def taylor_deltas(model, X: np.ndarray) -> np.ndarray:
    """First-order estimate of ``E(x) - E(x_{-i})`` for every row and i."""
    return (2.0 * X - 1.0) * model.grad_input(X)


def gradient_guided_probs(model, X: np.ndarray) -> np.ndarray:
    return _softmax_rows(2.0 * taylor_deltas(model, X))


def sampled_terms(model, X: np.ndarray, idx: np.ndarray, term: str = "ratio", clamp: float = 30.0):
    deltas = model.flip_deltas_node(X, np.asarray(idx, dtype=np.int64))
    return _terms(deltas, term, clamp)


def _basic_per_sample(terms: Tensor, n_at_idx: np.ndarray) -> Tensor:
    if np.any(n_at_idx <= 0):
        raise ValueError("sampled index has zero proposal mass")
    s = n_at_idx.shape[1]
    return T.sum_(T.mul(terms, 1.0 / (s * n_at_idx)), axis=1)


# ---------------------------------------------------------------- single-point API

def rm_full_loss(model, x, exponent_clamp: float = 30.0) -> LossValue:
    X = _single(model, x)
    terms, ev = full_terms(model, X, "ratio", exponent_clamp)
    return LossValue(T.sum_(terms), terms.data[0].copy(), ev)


def rm_g_loss(model, x) -> LossValue:
    X = _single(model, x)
    terms, _ = full_terms(model, X, "g")
    return LossValue(T.sum_(terms), terms.data[0].copy(), 0)


def exact_optimal_proposal(model, x) -> ProposalDistribution:
    X = _single(model, x)
    return ProposalDistribution(X[0].copy(), exact_optimal_probs(model, X)[0])


def taylor_delta(model, x) -> np.ndarray:
    X = _single(model, x)
    return taylor_deltas(model, X)[0]


def gradient_guided_proposal(model, x) -> ProposalDistribution:
    X = _single(model, x)
    return ProposalDistribution(X[0].copy(), gradient_guided_probs(model, X)[0])


def _indices(idx, d: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(1, -1)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= d:
        raise ValueError("indices must be a non-empty list of flip positions in [0, d)")
    return idx


def is_estimate_basic(model, x, proposal: ProposalDistribution, indices,
                      exponent_clamp: float = 30.0, term: str = "ratio") -> LossValue:
    """(1/s) * sum_t term(i_t) / n(i_t): the importance-weighted estimate."""
    X = _single(model, x)
    idx = _indices(indices, model.d)
    terms, ev = sampled_terms(model, X, idx, term, exponent_clamp)
    per = _basic_per_sample(terms, proposal.probs[idx])
    return LossValue(T.sum_(per), terms.data[0].copy(), ev, idx[0])


def is_estimate_advanced(model, x, indices, exponent_clamp: float = 30.0, term: str = "ratio") -> LossValue:
    """Unweighted sum of the sampled terms."""
    X = _single(model, x)
    idx = _indices(indices, model.d)
    terms, ev = sampled_terms(model, X, idx, term, exponent_clamp)
    return LossValue(T.sum_(terms), terms.data[0].copy(), ev, idx[0])


def rmwrand_estimate(model, x, indices, exponent_clamp: float = 30.0, term: str = "ratio") -> LossValue:
    """(d/s) * sum of terms at uniformly drawn flips."""
    X = _single(model, x)
    idx = _indices(indices, model.d)
    terms, ev = sampled_terms(model, X, idx, term, exponent_clamp)
    scale = model.d / idx.shape[1]
    return LossValue(T.mul(T.sum_(terms), scale), terms.data[0].copy(), ev, idx[0])


# ---------------------------------------------------------------- batch loss

def batch_loss(model, batch, spec: EstimatorSpec, rng: np.random.Generator | None = None,
               indices: np.ndarray | None = None) -> LossValue:
    """Mean per-sample loss over ``batch``.

    Sampled kinds draw a fresh proposal and ``spec.s`` fresh flips for every row,
    unless ``indices`` (``(B, s)``) is given, in which case those flips are reused.
    """
    X = check_bits(batch, model.d)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    B, d = X.shape
    spec.check(d)
    kind, clamp = spec.kind, spec.exponent_clamp

    if kind == EstimatorKind.RM_FULL:
        terms, ev = full_terms(model, X, "ratio", clamp)
        per = T.sum_(terms, axis=1)
        idx = None
    elif kind == EstimatorKind.RM_G_FULL:
        terms, ev = full_terms(model, X, "g")
        per = T.sum_(terms, axis=1)
        idx = None
    else:
        if kind == EstimatorKind.RMWRAND:
            probs = np.full((B, d), 1.0 / d)
        else:
            probs = gradient_guided_probs(model, X)
        if indices is None:
            if rng is None:
                raise ValueError("sampled estimators need an rng")
            idx = categorical_rows(probs, spec.s, rng)
        else:
            idx = np.asarray(indices, dtype=np.int64).reshape(B, -1)
        terms, ev = sampled_terms(model, X, idx, spec.term, clamp)
        if kind == EstimatorKind.RMWGGIS_BASIC:
            per = _basic_per_sample(terms, np.take_along_axis(probs, idx, axis=1))
        elif kind == EstimatorKind.RMWGGIS_ADVANCED:
            per = T.sum_(terms, axis=1)
        else:
            per = T.mul(T.sum_(terms, axis=1), d / idx.shape[1])
    return LossValue(T.mean(per), per.data.copy(), ev, idx)
