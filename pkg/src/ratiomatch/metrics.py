"""Evaluation metrics: Hamming-kernel MMD, coupling RMSE, full objective, energy grids."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import GrayCodec, encode_points
from .energy import DimensionError, check_bits

KERNEL_NAME = "d - Hamming (linear kernel), biased V-statistic, squared"


def hamming_kernel(x, y) -> int:
    x, y = np.asarray(x).reshape(-1), np.asarray(y).reshape(-1)
    if x.shape != y.shape:
        raise DimensionError("kernel arguments differ in dimension")
    return int(x.size - np.count_nonzero(x != y))


@dataclass(frozen=True)
class MmdReport:
    mmd_sq: float
    n_x: int
    n_y: int
    kernel: str = KERNEL_NAME


def mmd_linear(X, Y) -> MmdReport:
    """Biased MMD^2 under k(x, y) = d - Hamming(x, y).

    The kernel is linear in the bits, so the all-pairs V-statistic collapses to
    ``2 * ||mean(X) - mean(Y)||^2``. Column counts are combined in exact integer
    arithmetic, which makes identical multisets score exactly zero.
    """
    X, Y = check_bits(X), check_bits(Y)
    if X.shape[1] != Y.shape[1]:
        raise DimensionError("sample sets differ in dimension")
    nx, ny = X.shape[0], Y.shape[0]
    if nx == 0 or ny == 0:
        raise ValueError("MMD needs two non-empty sample sets")
    cx = X.sum(axis=0).astype(np.int64)
    cy = Y.sum(axis=0).astype(np.int64)
    num = sum((int(a) * ny - int(b) * nx) ** 2 for a, b in zip(cx, cy))
    return MmdReport(2.0 * num / (nx * ny) ** 2, nx, ny)


def rmse_connectivity(J_hat, J_true) -> float:
    J_hat, J_true = np.asarray(J_hat, dtype=np.float64), np.asarray(J_true, dtype=np.float64)
    if J_hat.shape != J_true.shape or J_hat.ndim != 2 or J_hat.shape[0] != J_hat.shape[1]:
        raise ValueError(f"connectivity shapes differ or are not square: {J_hat.shape} vs {J_true.shape}")
    for M in (J_hat, J_true):
        if not np.allclose(M, M.T, rtol=0, atol=1e-12):
            raise ValueError("connectivity matrices must be symmetric")
    return float(np.sqrt(np.mean((J_hat - J_true) ** 2)))


def edge_separation(J_hat, J_true) -> tuple[float, float]:
    """Mean ``|J_hat|`` over true edges and over non-edges (off-diagonal)."""
    J_hat, J_true = np.asarray(J_hat), np.asarray(J_true)
    off = ~np.eye(J_true.shape[0], dtype=bool)
    edge = (J_true != 0) & off
    return float(np.abs(J_hat[edge]).mean()), float(np.abs(J_hat[~edge & off]).mean())


def per_sample_objective(model, samples, exponent_clamp: float = 30.0, chunk: int = 512) -> np.ndarray:
    """Full ratio-matching objective of every row, computed without recording gradients."""
    X = check_bits(samples, model.d)
    out = np.empty(X.shape[0])
    cols = np.arange(model.d)
    for start in range(0, X.shape[0], chunk):
        part = X[start:start + chunk]
        deltas = model.flip_deltas(part, np.broadcast_to(cols, (part.shape[0], model.d)))
        out[start:start + chunk] = np.exp(np.clip(2.0 * deltas, -exponent_clamp, exponent_clamp)).sum(axis=1)
    return out


def objective_value_eval(model, samples, exponent_clamp: float = 30.0) -> float:
    X = check_bits(samples, model.d)
    if X.shape[0] == 0:
        raise ValueError("objective needs at least one sample")
    return float(per_sample_objective(model, X, exponent_clamp).mean())


@dataclass
class LandscapeGrid:
    resolution: int
    points: np.ndarray
    energies: np.ndarray

    def __post_init__(self):
        m = self.resolution ** 2
        if self.points.shape != (m, 2) or self.energies.shape != (m,):
            raise ValueError("grid must hold resolution^2 points and energies")

    def to_csv(self, path) -> None:
        table = np.column_stack([self.points, self.energies])
        np.savetxt(path, table, delimiter=",", fmt="%.17g", header="x,y,energy", comments="")


def energy_landscape(model, codec: GrayCodec, resolution: int = 100, chunk: int = 4096) -> LandscapeGrid:
    """Energies on a uniform ``resolution x resolution`` grid over the codec range (x varies fastest)."""
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if model.d != 2 * codec.k:
        raise DimensionError(f"model dimension {model.d} != 2 * codec bits {2 * codec.k}")
    axis = np.linspace(codec.lo, codec.hi, resolution)
    gx, gy = np.meshgrid(axis, axis, indexing="xy")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    bits = encode_points(codec, pts)
    energies = np.concatenate([model.energy(bits[i:i + chunk]) for i in range(0, len(bits), chunk)])
    return LandscapeGrid(resolution, pts, energies)
