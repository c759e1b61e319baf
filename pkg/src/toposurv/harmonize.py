"""PCA scanner-bias removal, fit on training embeddings only."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateInput(ValueError):
    pass


@dataclass
class PcaModel:
    """Train-cohort mean, orthonormal components (rows, descending
    explained variance) and the number of leading components to drop."""

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    discard_k: int = 3


def pca_fit(embeddings: np.ndarray, discard_k: int = 3) -> PcaModel:
    """Eigendecomposition of the sample covariance, eigenvalue-descending,
    each component's largest-magnitude entry made positive."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateInput(f"need an (N>=2, d) matrix, got {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    components = eigvecs[:, order].T
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mean, components, eigvals, discard_k)


def pca_remove(model: PcaModel, embeddings: np.ndarray) -> np.ndarray:
    """Center, then project out the first discard_k components; the result
    stays in the original d-dimensional space."""
    x = np.asarray(embeddings, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x) - model.mean
    for j in range(model.discard_k):
        c = model.components[j]
        x = x - np.outer(x @ c, c)
    return x[0] if single else x
