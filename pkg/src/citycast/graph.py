"""Spatial networks: adjacency construction, normalisation, normalised Laplacian
and Laplacian-eigenvector region embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import AsymmetricAdjacencyError, EmptyGraphError, ParameterError, RankError

ZERO_EIG_TOL = 1e-8
SYM_TOL = 1e-12


@dataclass(frozen=True)
class TrafficGraph:
    adjacency: np.ndarray
    kind: Literal["sensor", "grid"] = "sensor"

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ParameterError(f"adjacency must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ParameterError("adjacency weights must be finite and non-negative")
        if np.max(np.abs(a - a.T), initial=0.0) > SYM_TOL:
            raise AsymmetricAdjacencyError("adjacency matrix is not symmetric")
        if np.any(np.diag(a) != 0):
            raise ParameterError("adjacency diagonal must be zero")
        if self.kind not in ("sensor", "grid"):
            raise ParameterError(f"unknown network kind {self.kind!r}")
        object.__setattr__(self, "adjacency", a)

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]


@dataclass(frozen=True)
class RegionEmbeddings:
    phi: np.ndarray  # (R, k)
    eigenvalues: np.ndarray  # (k,)

    @property
    def k(self) -> int:
        return self.phi.shape[1]


def grid_adjacency(rows: int, cols: int) -> np.ndarray:
    n = rows * cols
    a = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                a[i, i + 1] = a[i + 1, i] = 1.0
            if r + 1 < rows:
                a[i, i + cols] = a[i + cols, i] = 1.0
    return a


def build_adjacency(
    kind: Literal["sensor", "grid"],
    geometry,
    kernel_sigma: float = 1.0,
    threshold: float = 0.1,
) -> TrafficGraph:
    """Build a sensor graph from coordinates or a 4-neighbour grid graph.

    For ``kind="sensor"`` ``geometry`` is an (R, 2) array of coordinates and
    edges carry Gaussian-kernel weights exp(-d^2 / sigma^2) when they reach
    ``threshold``.  For ``kind="grid"`` it is a (rows, cols) pair.
    """
    if kind == "grid":
        rows, cols = (int(v) for v in geometry)
        if rows < 1 or cols < 1 or rows * cols < 2:
            raise ParameterError(f"grid needs at least 2 cells, got {rows}x{cols}")
        return TrafficGraph(grid_adjacency(rows, cols), "grid")
    if kind != "sensor":
        raise ParameterError(f"unknown network kind {kind!r}")
    xy = np.asarray(geometry, dtype=np.float64)
    if xy.ndim != 2 or xy.shape[0] < 2:
        raise ParameterError("sensor graphs need at least two coordinate pairs")
    if kernel_sigma <= 0:
        raise ParameterError("kernel_sigma must be positive")
    d2 = np.sum((xy[:, None, :] - xy[None, :, :]) ** 2, axis=-1)
    w = np.exp(-d2 / kernel_sigma**2)
    w = np.where(w >= threshold, w, 0.0)
    np.fill_diagonal(w, 0.0)
    w = 0.5 * (w + w.T)
    if not np.any(w > 0):
        raise EmptyGraphError(
            f"no pair of the {xy.shape[0]} sensors reaches weight threshold {threshold}"
        )
    return TrafficGraph(w, "sensor")


def _inv_sqrt_degree(a: np.ndarray) -> np.ndarray:
    deg = a.sum(axis=1)
    out = np.zeros_like(deg)
    nz = deg > 0
    out[nz] = 1.0 / np.sqrt(deg[nz])
    return out


def normalize_adjacency(g: TrafficGraph) -> np.ndarray:
    """D^-1/2 A D^-1/2, with isolated nodes left as zero rows/columns."""
    s = _inv_sqrt_degree(g.adjacency)
    return s[:, None] * g.adjacency * s[None, :]


def normalized_laplacian(g: TrafficGraph) -> np.ndarray:
    lap = np.eye(g.num_nodes) - normalize_adjacency(g)
    return 0.5 * (lap + lap.T)


def jacobi_eigh(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100):
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix.

    Returns ascending eigenvalues and the matching orthonormal eigenvectors as
    columns.  Sweeps stop once the off-diagonal Frobenius norm is below ``tol``.
    """
    m = np.array(a, dtype=np.float64)
    n = m.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(m, -1) ** 2) * 2)
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (m[q, q] - m[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                mp, mq = m[:, p].copy(), m[:, q].copy()
                m[:, p] = c * mp - s * mq
                m[:, q] = s * mp + c * mq
                mp, mq = m[p, :].copy(), m[q, :].copy()
                m[p, :] = c * mp - s * mq
                m[q, :] = s * mp + c * mq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        off = np.sqrt(np.sum(np.tril(m, -1) ** 2) * 2)
        if off > tol:
            raise ArithmeticError(f"Jacobi did not converge (off-diagonal norm {off:.3e})")
    w = np.diag(m).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def symmetric_eigh(a: np.ndarray, method: Literal["lapack", "jacobi"] = "lapack"):
    if method == "jacobi":
        return jacobi_eigh(a)
    if method == "lapack":
        w, v = np.linalg.eigh(a)
        return w, v
    raise ParameterError(f"unknown eigensolver {method!r}")


def fix_signs(vectors: np.ndarray, tie_tol: float = 1e-10) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive.

    Entries within ``tie_tol`` of the column maximum count as tied; the lowest
    index among them decides.
    """
    out = vectors.copy()
    for j in range(out.shape[1]):
        mag = np.abs(out[:, j])
        idx = int(np.flatnonzero(mag >= mag.max() - tie_tol)[0])
        if out[idx, j] < 0:
            out[:, j] = -out[:, j]
    return out


def region_embeddings(
    g: TrafficGraph, k: int = 8, method: Literal["lapack", "jacobi"] = "lapack"
) -> RegionEmbeddings:
    """The k smallest non-trivial eigenvectors of the normalised Laplacian.

    Every eigenvalue below 1e-8 is treated as trivial, so a graph with c
    connected components loses c columns.
    """
    if k < 1:
        raise ParameterError(f"k must be positive, got {k}")
    w, v = symmetric_eigh(normalized_laplacian(g), method)
    keep = w >= ZERO_EIG_TOL
    available = int(keep.sum())
    if k > available:
        raise RankError(k, available)
    vals = w[keep][:k]
    vecs = fix_signs(v[:, keep][:, :k])
    return RegionEmbeddings(phi=vecs, eigenvalues=vals)
