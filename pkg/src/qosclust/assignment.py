"""Relaxed cluster-assignment algebra.

Rows of the assignment matrix live on the probability simplex; the nuclear
norm stands in for the number of clusters.
"""
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .errors import IterationLimitError, NumericalDomainError

DYKSTRA_TOL = 1e-10
DYKSTRA_MAX_SWEEPS = 10_000


def nuclear_norm(m):
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return 0.0
    return float(np.linalg.svd(m, compute_uv=False).sum())


def svt(z, thresh):
    """Singular value thresholding: shrink every singular value by ``thresh``."""
    if thresh < 0:
        raise ValueError("threshold must be nonnegative")
    z = np.asarray(z, dtype=np.float64)
    try:
        u, s, vt = np.linalg.svd(z, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalDomainError("SVD did not converge") from exc
    s = np.maximum(s - thresh, 0.0)
    return (u * s) @ vt


def project_rows_simplex(a, method="dykstra", tol=DYKSTRA_TOL, max_sweeps=DYKSTRA_MAX_SWEEPS, kernel_module=None):
    """Euclidean projection of every row of ``a`` onto the probability simplex.

    ``method="dykstra"`` alternates box and hyperplane projections with
    correction terms; ``method="sort"`` is the exact sorting-based projection.
    """
    k = kernel_module or kernels
    a = np.ascontiguousarray(np.atleast_2d(a), dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericalDomainError("non-finite entries in assignment matrix")
    if method == "sort":
        return k.sort_rows(a)
    if method != "dykstra":
        raise ValueError(f"unknown projection method {method!r}")
    out, sweeps = k.dykstra_rows(a, float(tol), int(max_sweeps))
    if np.any(sweeps < 0):
        bad = np.flatnonzero(sweeps < 0).tolist()
        raise IterationLimitError(f"Dykstra projection did not converge within {max_sweeps} sweeps for rows {bad}")
    return out


@dataclass
class ClusterSets:
    labels: np.ndarray  # winning cluster per cell
    sets: list  # sets[c] = sorted cell indices assigned to cluster c

    @property
    def n_clusters(self):
        """Effective cluster count: clusters with at least one cell."""
        return sum(1 for s in self.sets if s)

    @property
    def active(self):
        return [c for c, s in enumerate(self.sets) if s]


def extract_clusters(a):
    """Hard clusters by per-row argmax; ties go to the lowest cluster index."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    labels = np.argmax(a, axis=1)  # first maximum wins
    sets = [np.flatnonzero(labels == c).tolist() for c in range(a.shape[1])]
    return ClusterSets(labels=labels, sets=sets)


def one_hot(labels, n_clusters):
    labels = np.asarray(labels)
    a = np.zeros((labels.shape[0], n_clusters))
    a[np.arange(labels.shape[0]), labels] = 1.0
    return a
