"""Energy functions over {0,1}^d.

Bit batches are plain ``(n, d)`` numpy arrays holding 0/1 values. Models keep
their parameters in a :class:`ParamSet` and build differentiable energies on
the autodiff tape; the numpy-returning helpers are thin wrappers over that.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import _kernels
from . import tensor as T
from .tensor import ParamSet, Tensor


class DimensionError(ValueError):
    pass


def check_bits(X, d: int | None = None) -> np.ndarray:
    """Validate a bit batch and return it as float64 ``(n, d)``."""
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] == 0:
        raise DimensionError(f"expected a 2-D bit batch, got shape {X.shape}")
    if d is not None and X.shape[1] != d:
        raise DimensionError(f"batch has dimension {X.shape[1]}, model expects {d}")
    if not np.isin(X, (0, 1)).all():
        raise ValueError("bit batch entries must be 0 or 1")
    return X.astype(np.float64, copy=False)


def flip(x, i: int) -> np.ndarray:
    y = np.array(x, copy=True)
    y[..., i] = 1 - y[..., i]
    return y


def all_flips(x) -> np.ndarray:
    """The d single-bit-flip neighbours of x, one per row."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    nb = np.tile(x, (d, 1))
    idx = np.arange(d)
    nb[idx, idx] = 1.0 - nb[idx, idx]
    return nb


def _flip_rows(X: np.ndarray, cols: np.ndarray):
    """Row index, column index and flipped copies for every (row, col) pair."""
    B, k = cols.shape
    rows = np.repeat(np.arange(B), k)
    c = cols.reshape(-1)
    Xf = X[rows].copy()
    Xf[np.arange(rows.size), c] = 1.0 - Xf[np.arange(rows.size), c]
    return rows, c, Xf


class EnergyModel:
    """Base class. Subclasses implement :meth:`energy_node`."""

    kind = "abstract"
    d: int
    params: ParamSet

    def energy_node(self, X) -> Tensor:
        raise NotImplementedError

    def energy(self, X) -> np.ndarray:
        X = check_bits(X, self.d)
        return self.energy_node(X).data.copy()

    def grad_input(self, X) -> np.ndarray:
        """Gradient of the continuous extension of E w.r.t. the input, per row."""
        X = check_bits(X, self.d)
        xt = Tensor(X, requires_grad=True)
        (g,) = T.grad(self.energy_node(xt).sum(), [xt])
        return g

    def flip_deltas_node(self, X: np.ndarray, cols: np.ndarray) -> Tensor:
        """``E(x_b) - E(x_b flipped at cols[b, j])`` as a ``(B, k)`` tape node."""
        B, k = cols.shape
        rows, _, Xf = _flip_rows(X, cols)
        e = self.energy_node(np.vstack([X, Xf]))
        base = T.take(e, rows)
        nb = T.take(e, slice(B, None))
        return T.sub(base, nb).reshape(B, k)

    def flip_deltas(self, X, cols) -> np.ndarray:
        X = check_bits(X, self.d)
        cols = np.asarray(cols, dtype=np.int64).reshape(X.shape[0], -1)
        return self.flip_deltas_node(X, cols).data.copy()

    def site_gap(self, X: np.ndarray, i: int) -> np.ndarray:
        """``E(x_{-i}) - E(x)`` for every row, flipping the single site i."""
        cols = np.full((X.shape[0], 1), i, dtype=np.int64)
        return -self.flip_deltas_node(X, cols).data[:, 0]

    def neighbor_energies(self, x) -> np.ndarray:
        """``[E(x_{-1}), ..., E(x_{-d})]`` for a single point."""
        X = check_bits(x, self.d)
        if X.shape[0] != 1:
            raise DimensionError("neighbor_energies takes a single point")
        return self.energy(all_flips(X[0]))

    def architecture(self) -> dict:
        raise NotImplementedError

    def freeze_copy(self) -> "EnergyModel":
        raise NotImplementedError


# ---------------------------------------------------------------- linear

class LinearEnergy(EnergyModel):
    """``E(x) = w . x + c``; with ``w = 0`` this is a constant energy."""

    kind = "linear"

    def __init__(self, w, c: float = 0.0, params: ParamSet | None = None):
        if params is None:
            w = np.asarray(w, dtype=np.float64).reshape(-1)
            params = ParamSet([("w", w), ("c", np.array([float(c)]))])
        self.params = params
        self.d = params["w"].shape[0]

    @classmethod
    def constant(cls, d: int, c: float = 0.0) -> "LinearEnergy":
        return cls(np.zeros(d), c)

    def energy_node(self, X) -> Tensor:
        x = T.as_tensor(X)
        w = T.reshape(self.params["w"], (1, self.d))
        return T.affine(w, self.params["c"], x).reshape(x.shape[0])

    def architecture(self) -> dict:
        return {"kind": self.kind, "d": self.d}

    def freeze_copy(self) -> "LinearEnergy":
        return LinearEnergy(None, params=self.params.copy())


# ---------------------------------------------------------------- MLP

class MlpEnergy(EnergyModel):
    """d -> ``depth`` Swish layers of ``width`` -> scalar."""

    kind = "mlp"

    def __init__(self, d: int, width: int = 256, depth: int = 3, rng=None, params: ParamSet | None = None):
        if d < 1 or width < 1 or depth < 1:
            raise ValueError("d, width and depth must be positive")
        self.d, self.width, self.depth = d, width, depth
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            params = ParamSet()
            fan_in = d
            for layer in range(depth):
                bound = 1.0 / np.sqrt(fan_in)
                params[f"W{layer}"] = rng.uniform(-bound, bound, size=(width, fan_in))
                params[f"b{layer}"] = rng.uniform(-bound, bound, size=width)
                fan_in = width
            bound = 1.0 / np.sqrt(fan_in)
            params["W_out"] = rng.uniform(-bound, bound, size=(1, fan_in))
            params["b_out"] = rng.uniform(-bound, bound, size=1)
        self.params = params

    def _head(self, h: Tensor) -> Tensor:
        """Everything after the first pre-activation."""
        p = self.params
        h = T.swish(h)
        for layer in range(1, self.depth):
            h = T.swish(T.affine(p[f"W{layer}"], p[f"b{layer}"], h))
        out = T.affine(p["W_out"], p["b_out"], h)
        return out.reshape(out.shape[0])

    def energy_node(self, X) -> Tensor:
        x = T.as_tensor(X)
        if x.data.ndim != 2 or x.shape[1] != self.d:
            raise DimensionError(f"MLP expects (n, {self.d}) input, got {x.shape}")
        return self._head(T.affine(self.params["W0"], self.params["b0"], x))

    def flip_deltas_node(self, X: np.ndarray, cols: np.ndarray) -> Tensor:
        # First layer of a flipped row is pre(x) + W0[:, i] * (1 - 2 x_i); avoids
        # materialising B*k full input rows.
        B, k = cols.shape
        W0, b0 = self.params["W0"], self.params["b0"]
        rows = np.repeat(np.arange(B), k)
        c = cols.reshape(-1)
        delta = 1.0 - 2.0 * X[rows, c]
        e = self._head(_flip_preact(X, W0, b0, k, c, delta))
        base = T.take(e, rows)
        nb = T.take(e, slice(B, None))
        return T.sub(base, nb).reshape(B, k)

    def architecture(self) -> dict:
        return {"kind": self.kind, "d": self.d, "width": self.width, "depth": self.depth}

    def freeze_copy(self) -> "MlpEnergy":
        return MlpEnergy(self.d, self.width, self.depth, params=self.params.copy())


def _flip_preact(X: np.ndarray, W0: Tensor, b0: Tensor, k: int, c: np.ndarray, delta: np.ndarray) -> Tensor:
    """First-layer pre-activations of ``[X; every requested flip of X]``."""
    B, d = X.shape
    h = W0.shape[0]
    out = np.empty((B * (k + 1), h))
    base = out[:B]
    np.matmul(X, W0.data.T, out=base)
    base += b0.data
    flipped = out[B:].reshape(B, k, h)
    flipped[:] = base[:, None, :]
    out[B:] += W0.data.T[c] * delta[:, None]

    def bw(g, need):
        gb_rows = g[:B] + g[B:].reshape(B, k, h).sum(axis=1)
        gw = gb = None
        if need[0]:
            sel = sp.csr_matrix((delta, (c, np.arange(c.size))), shape=(d, c.size))
            gw = gb_rows.T @ X + np.asarray((sel @ g[B:]).T)
        if need[1]:
            gb = gb_rows.sum(axis=0)
        return gw, gb

    return T.custom(out, (W0, b0), bw, "flip_preact")


# ---------------------------------------------------------------- Ising

def cyclic_lattice_adjacency(side: int) -> np.ndarray:
    """Adjacency of a side x side torus; every node has exactly 4 neighbours."""
    if side < 3:
        raise ValueError("side must be >= 3 for a simple 4-regular torus")
    d = side * side
    A = np.zeros((d, d))
    for r in range(side):
        for c in range(side):
            i = r * side + c
            for j in (((r + 1) % side) * side + c, r * side + (c + 1) % side):
                A[i, j] = A[j, i] = 1.0
    return A


def ring_adjacency(n: int) -> np.ndarray:
    A = np.zeros((n, n))
    for i in range(n):
        A[i, (i + 1) % n] = A[(i + 1) % n, i] = 1.0
    return A


def _sym_from_upper(u: Tensor, d: int, iu) -> Tensor:
    J = np.zeros((d, d))
    J[iu] = u.data
    J = J + J.T

    def bw(g, need):
        return (g[iu] + g.T[iu],)

    return T.custom(J, (u,), bw, "sym_from_upper")


class IsingEnergy(EnergyModel):
    """``E = -s^T J s - b^T s`` with J symmetric, zero diagonal.

    ``s = 2x - 1`` under the default ``"spin"`` encoding, or ``s = x`` under
    ``"binary"``. J is stored as its strict upper triangle ``J_upper`` so
    symmetry and the zero diagonal hold by construction.
    """

    kind = "ising"

    def __init__(self, d: int, J=None, b=None, encoding: str = "spin", learnable: bool = True,
                 side: int | None = None, sigma: float | None = None, params: ParamSet | None = None):
        if encoding not in ("spin", "binary"):
            raise ValueError("encoding must be 'spin' or 'binary'")
        self.d, self.encoding, self.learnable = d, encoding, learnable
        self.side, self.sigma = side, sigma
        self._iu = np.triu_indices(d, k=1)
        if params is None:
            J = np.zeros((d, d)) if J is None else np.asarray(J, dtype=np.float64)
            if J.shape != (d, d):
                raise DimensionError("J must be d x d")
            if not np.allclose(J, J.T, atol=0) or np.any(np.diag(J) != 0):
                raise ValueError("J must be symmetric with zero diagonal")
            params = ParamSet([("J_upper", J[self._iu]),
                               ("b", np.zeros(d) if b is None else np.asarray(b, dtype=np.float64))])
        self.params = params

    @classmethod
    def lattice(cls, side: int, sigma: float, encoding: str = "spin") -> "IsingEnergy":
        """Fixed true model: J = sigma * adjacency of a cyclic side x side lattice, b = 0."""
        A = cyclic_lattice_adjacency(side)
        return cls(side * side, J=sigma * A, encoding=encoding, learnable=False, side=side, sigma=sigma)

    @classmethod
    def learnable_zero(cls, d: int, encoding: str = "spin", side: int | None = None) -> "IsingEnergy":
        return cls(d, encoding=encoding, learnable=True, side=side)

    @property
    def J(self) -> np.ndarray:
        # cached per parameter tensor; adam_step swaps tensors, which invalidates it
        u = self.params["J_upper"]
        if getattr(self, "_J_key", None) is not u:
            J = np.zeros((self.d, self.d))
            J[self._iu] = u.data
            self._J_val, self._J_key = J + J.T, u
        return self._J_val.copy()

    def _J_view(self) -> np.ndarray:
        self.J
        return self._J_val

    @property
    def b(self) -> np.ndarray:
        return self.params["b"].data.copy()

    def _spins(self, X: np.ndarray) -> np.ndarray:
        return 2.0 * X - 1.0 if self.encoding == "spin" else X

    def J_node(self) -> Tensor:
        return _sym_from_upper(self.params["J_upper"], self.d, self._iu)

    def energy_node(self, X) -> Tensor:
        X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.d:
            raise DimensionError(f"Ising expects (n, {self.d}) input, got {X.shape}")
        S = self._spins(X)
        quad = T.sum_(T.mul(T.matmul(S, self.J_node()), S), axis=1)
        lin = T.matmul(S, self.params["b"])
        return T.sub(T.mul(quad, -1.0), lin)

    def grad_input(self, X) -> np.ndarray:
        X = check_bits(X, self.d)
        S = self._spins(X)
        g = -2.0 * S @ self._J_view() - self.params["b"].data
        # chain rule through s = 2x - 1
        return 2.0 * g if self.encoding == "spin" else g

    def flip_deltas_node(self, X: np.ndarray, cols: np.ndarray) -> Tensor:
        B, k = cols.shape
        rows = np.repeat(np.arange(B), k)
        c = cols.reshape(-1)
        S = self._spins(X)
        field = T.take(T.matmul(S, self.J_node()), (rows, c))
        bc = T.take(self.params["b"], c)
        inner = T.add(T.mul(field, 2.0), bc)
        if self.encoding == "spin":
            coef = -2.0 * S[rows, c]
        else:
            coef = 1.0 - 2.0 * X[rows, c]
        return T.mul(inner, coef).reshape(B, k)

    def site_gap(self, X: np.ndarray, i: int) -> np.ndarray:
        S = self._spins(X)
        inner = 2.0 * (S @ self._J_view()[i]) + self.params["b"].data[i]
        coef = -2.0 * S[:, i] if self.encoding == "spin" else 1.0 - 2.0 * X[:, i]
        return -coef * inner

    def gibbs_scan(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        """One systematic Gibbs scan of every row of X using uniforms U (same shape)."""
        S = np.ascontiguousarray(self._spins(X), dtype=np.float64)
        if getattr(self, "_csr_key", None) is not self.params["J_upper"]:
            self._csr, self._csr_key = sp.csr_matrix(self._J_view()), self.params["J_upper"]
        _kernels.ising_scan(S, self._csr, self.params["b"].data, U,
                            self.encoding == "spin")
        return (S > 0).astype(np.float64)

    def neighbor_energies(self, x) -> np.ndarray:
        X = check_bits(x, self.d)
        if X.shape[0] != 1:
            raise DimensionError("neighbor_energies takes a single point")
        e = self.energy(X)[0]
        S = self._spins(X)[0]
        inner = 2.0 * (self._J_view() @ S) + self.params["b"].data
        coef = -2.0 * S if self.encoding == "spin" else 1.0 - 2.0 * X[0]
        return e - coef * inner

    def architecture(self) -> dict:
        arch = {"kind": self.kind, "d": self.d, "encoding": self.encoding, "learnable": int(self.learnable)}
        if self.side is not None:
            arch["side"] = self.side
        if self.sigma is not None:
            arch["sigma"] = repr(float(self.sigma))
        return arch

    def freeze_copy(self) -> "IsingEnergy":
        return IsingEnergy(self.d, encoding=self.encoding, learnable=self.learnable, side=self.side,
                           sigma=self.sigma, params=self.params.copy())


def model_from_architecture(arch: dict, params: ParamSet | None = None, rng=None) -> EnergyModel:
    kind = arch["kind"]
    d = int(arch["d"])
    if kind == "mlp":
        return MlpEnergy(d, int(arch["width"]), int(arch["depth"]), rng=rng, params=params)
    if kind == "linear":
        return LinearEnergy(np.zeros(d)) if params is None else LinearEnergy(None, params=params)
    if kind == "ising":
        sigma = arch.get("sigma")
        side = arch.get("side")
        return IsingEnergy(d, encoding=arch.get("encoding", "spin"), learnable=bool(int(arch.get("learnable", 1))),
                           side=None if side is None else int(side),
                           sigma=None if sigma is None else float(sigma), params=params)
    raise ValueError(f"unknown model kind {kind!r}")
