# app/preprocess.py
"""
Per-dimension normalization followed by PCA that keeps floor(D/2) components.

`fit` streams moments over a corpus of feature grids; `apply` is the affine map
v -> P^T ((v - mean) / std), built from tensor ops so it differentiates like any other stage.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from app import tensor as T
from app.cnn import FeatureGrid
from app.errors import DataError, EmptyCorpusError, ShapeError
from app.tensor import Tensor

logger = logging.getLogger("vlm.preprocess")

VARIANCE_FLOOR = 1e-12


class MomentAccumulator:
    """Running mean and co-moment matrix, merged batch by batch (Chan et al. update), in float64."""

    def __init__(self, depth: int):
        self.depth = depth
        self.count = 0
        self.mean = np.zeros(depth)
        self.comoment = np.zeros((depth, depth))

    def update(self, cells: np.ndarray) -> None:
        cells = np.asarray(cells, dtype=np.float64).reshape(-1, self.depth)
        n_b = cells.shape[0]
        if n_b == 0:
            return
        mean_b = cells.mean(axis=0)
        centered = cells - mean_b
        m_b = centered.T @ centered

        n_a = self.count
        n = n_a + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.comoment = self.comoment + m_b + np.outer(delta, delta) * (n_a * n_b / n)
        self.count = n

    @property
    def covariance(self) -> np.ndarray:
        """Population covariance."""
        return self.comoment / max(self.count, 1)

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.covariance).copy()


@dataclass(frozen=True)
class PreprocessParams:
    mean: np.ndarray         # (D,)
    std: np.ndarray          # (D,)
    projection: np.ndarray   # (D, K), orthonormal columns
    eigenvalues: np.ndarray  # (K,), descending
    whiten: bool = False

    @property
    def depth(self) -> int:
        return self.mean.shape[0]

    @property
    def k(self) -> int:
        return self.projection.shape[1]

    def matrix(self) -> np.ndarray:
        """Effective (D, K) linear part, normalization folded in."""
        p = self.projection
        if self.whiten:
            p = p / np.sqrt(np.maximum(self.eigenvalues, VARIANCE_FLOOR))[None, :]
        return p / self.std[:, None]

    def offset(self) -> np.ndarray:
        return -(self.mean @ self.matrix())


def fit(corpus: Iterable[FeatureGrid], whiten: bool = False) -> PreprocessParams:
    acc: Optional[MomentAccumulator] = None
    grids = 0
    for grid in corpus:
        values = grid.values.data if isinstance(grid, FeatureGrid) else np.asarray(grid)
        if values.ndim != 3:
            raise ShapeError(f"feature grid must be H x W x D, got {values.shape}")
        if acc is None:
            acc = MomentAccumulator(values.shape[2])
        elif values.shape[2] != acc.depth:
            raise ShapeError(f"feature depth {values.shape[2]} differs from corpus depth {acc.depth}")
        acc.update(values)
        grids += 1

    if acc is None or acc.count == 0:
        raise EmptyCorpusError("preprocess fit: corpus is empty")
    depth = acc.depth
    if depth < 2:
        raise DataError(f"preprocess fit: feature depth {depth} < 2 cannot be halved")
    k = depth // 2
    if acc.count < k + 1:
        raise DataError(f"preprocess fit: {acc.count} cells, need at least {k + 1}")

    var = acc.variance
    dead = var < VARIANCE_FLOOR
    if dead.any():
        logger.warning("[preprocess] std floor applied dims=%s", np.flatnonzero(dead).tolist())
    std = np.where(dead, 1.0, np.sqrt(np.where(dead, 1.0, var)))

    corr = acc.covariance / np.outer(std, std)
    eigvals, eigvecs = np.linalg.eigh(corr)
    order = np.argsort(eigvals, kind="stable")[::-1][:k]
    proj = eigvecs[:, order]
    pivots = np.argmax(np.abs(proj), axis=0)
    signs = np.sign(proj[pivots, np.arange(k)])
    proj = proj * np.where(signs == 0, 1.0, signs)[None, :]

    logger.info("[preprocess] fitted grids=%d cells=%d depth=%d k=%d whiten=%s", grids, acc.count, depth, k, whiten)
    return PreprocessParams(
        mean=acc.mean.copy(),
        std=std,
        projection=proj,
        eigenvalues=np.maximum(eigvals[order], 0.0),
        whiten=whiten,
    )


def apply_values(params: PreprocessParams, values: Tensor) -> Tensor:
    """Map the trailing axis D -> K of any tensor (..., D)."""
    if values.ndim < 1 or values.shape[-1] != params.depth:
        raise ShapeError(f"preprocess apply: depth {values.shape[-1:]} does not match fitted depth {params.depth}")
    lead = values.shape[:-1]
    flat = T.reshape(values, (int(np.prod(lead, dtype=np.int64)), params.depth))
    out = T.add_bias(T.matmul(flat, Tensor(params.matrix())), Tensor(params.offset()))
    return T.reshape(out, lead + (params.k,))


def apply(params: PreprocessParams, grid: FeatureGrid) -> FeatureGrid:
    if grid.values.ndim != 3:
        raise ShapeError(f"feature grid must be H x W x D, got {grid.values.shape}")
    return FeatureGrid(layer_name=grid.layer_name, values=apply_values(params, grid.values))
