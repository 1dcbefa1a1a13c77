"""Dense projection kernels: annihilators of the controls, masked (leave-out)
projections and a Gram-matrix pseudoinverse.

The projection ``M = I - W (W'W)^{-1} W'`` is block diagonal over the connected
components of the bipartite graph linking observations to the control columns
they load on. Cluster dummies give one component per cluster, so everything in
this module works per component and only assembles a dense ``n x n`` matrix on
request.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_array
from scipy.sparse.csgraph import connected_components

from .errors import NonSymmetricInput, RankDeficientControls

PINV_RTOL = 1e-12


def pseudoinverse(G, tol=PINV_RTOL):
    """Moore-Penrose inverse of a symmetric positive semidefinite matrix.

    Eigenvalues at or below ``tol * max_eigenvalue`` are treated as zero.

    Raises
    ------
    NonSymmetricInput
        If ``G`` is asymmetric beyond ``1e-8`` relative to its largest entry.
    """
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise NonSymmetricInput(f"expected a square matrix, got shape {G.shape}")
    if G.size == 0:
        return G.copy()
    scale = np.max(np.abs(G))
    if scale == 0.0:
        return np.zeros_like(G)
    if np.max(np.abs(G - G.T)) > 1e-8 * scale:
        raise NonSymmetricInput("pseudoinverse expects a symmetric Gram matrix")
    evals, evecs = np.linalg.eigh(0.5 * (G + G.T))
    top = evals[-1]
    if top <= 0.0:
        return np.zeros_like(G)
    keep = evals > tol * top
    V = evecs[:, keep]
    return (V / evals[keep]) @ V.T


@dataclass(frozen=True, eq=False)
class ControlMatrix:
    """Strictly exogenous controls ``W`` (``n x K``), validated at construction.

    Rank is checked per connected component with a singular value cutoff
    matching the pseudoinverse tolerance (``sigma^2 > 1e-12 * sigma_max^2``).
    ``condition`` is the worst per-component condition number and is surfaced
    in diagnostics rather than enforced.
    """

    W: np.ndarray
    components: tuple = field(repr=False)
    condition: float = 1.0

    @classmethod
    def from_array(cls, W):
        W = np.array(W, dtype=float)
        if W.ndim == 1:
            W = W[:, None]
        if W.ndim != 2:
            raise ValueError(f"W must be a matrix, got shape {W.shape}")
        if not np.all(np.isfinite(W)):
            raise ValueError("W contains non-finite values")
        n, K = W.shape
        if K >= n:
            raise RankDeficientControls(f"need K < n, got K={K}, n={n}")
        comps = _components(W)
        worst = 1.0
        for rows, cols in comps:
            if cols.size == 0:
                continue
            s = np.linalg.svd(W[np.ix_(rows, cols)], compute_uv=False)
            rank = int(np.sum(s**2 > PINV_RTOL * s[0] ** 2)) if s[0] > 0 else 0
            if rank < cols.size:
                raise RankDeficientControls(
                    f"controls have rank deficiency among columns {cols.tolist()[:10]}"
                )
            worst = max(worst, float(s[0] / s[-1]))
        W.setflags(write=False)
        return cls(W=W, components=tuple(comps), condition=worst)

    @property
    def n(self):
        return self.W.shape[0]

    @property
    def K(self):
        return self.W.shape[1]

    def block(self, rows, cols):
        return self.W[np.ix_(rows, cols)]


def as_controls(W):
    if isinstance(W, ControlMatrix):
        return W
    return ControlMatrix.from_array(W)


def _components(W):
    """Row/column index sets of the connected blocks of ``W``'s support."""
    n, K = W.shape
    r, c = np.nonzero(W)
    graph = coo_array(
        (np.ones(r.size), (r, n + c)), shape=(n + K, n + K)
    ).tocsr()
    ncomp, labels = connected_components(graph, directed=False)
    row_lab, col_lab = labels[:n], labels[n:]
    order = np.argsort(row_lab, kind="stable")
    splits = np.flatnonzero(np.diff(row_lab[order])) + 1
    comps = []
    for rows in np.split(order, splits):
        lab = row_lab[rows[0]]
        cols = np.flatnonzero(col_lab == lab) if K else np.empty(0, dtype=int)
        comps.append((np.sort(rows), cols))
    # an all-zero column forms its own row-less component
    used = np.zeros(K, dtype=bool)
    for _, cols in comps:
        used[cols] = True
    if K and not used.all():
        raise RankDeficientControls("controls contain an all-zero column")
    comps.sort(key=lambda rc: rc[0][0])
    return comps


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    """Annihilator ``M`` of a :class:`ControlMatrix`, stored per component.

    ``blocks`` holds ``(rows, Q)`` with ``Q`` an orthonormal basis of the
    component's controls, so that ``M[rows, rows] = I - Q Q'``.
    """

    source: ControlMatrix
    blocks: tuple = field(repr=False)

    @property
    def n(self):
        return self.source.n

    def apply(self, v):
        """Return ``M @ v`` for a vector or an ``n x m`` array."""
        v = np.asarray(v, dtype=float)
        out = v.copy()
        for rows, Q in self.blocks:
            if Q.shape[1] == 0:
                continue
            out[rows] -= Q @ (Q.T @ v[rows])
        return out

    def block_dense(self, rows, Q):
        return np.eye(rows.size) - Q @ Q.T

    def dense(self):
        M = np.zeros((self.n, self.n))
        for rows, Q in self.blocks:
            M[np.ix_(rows, rows)] = self.block_dense(rows, Q)
        return M

    def trace(self):
        return float(self.n - sum(Q.shape[1] for _, Q in self.blocks))

    def inf_norm(self):
        """Maximum absolute row sum."""
        best = 0.0
        for rows, Q in self.blocks:
            best = max(best, float(np.abs(self.block_dense(rows, Q)).sum(axis=1).max()))
        return best


def build_projection(W):
    """Build ``M = I - W (W'W)^{-1} W'`` for full-rank controls.

    Identical component blocks (balanced panels with cluster dummies) share
    one factorization.
    """
    W = as_controls(W)
    seen = {}
    blocks = []
    for rows, cols in W.components:
        Wc = W.block(rows, cols)
        key = (Wc.shape, Wc.tobytes())
        Q = seen.get(key)
        if Q is None:
            if cols.size:
                Q, _ = np.linalg.qr(Wc)
            else:
                Q = np.zeros((rows.size, 0))
            seen[key] = Q
        blocks.append((rows, Q))
    return ProjectionMatrix(source=W, blocks=tuple(blocks))


class GramCache:
    """Thread-safe cache of ``(W_mask' W_mask)^+`` keyed by the keep-mask."""

    def __init__(self, W, tol=PINV_RTOL):
        self.W = np.asarray(W.W if isinstance(W, ControlMatrix) else W, dtype=float)
        self.tol = tol
        self._store = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, keep_mask):
        key = np.packbits(keep_mask).tobytes()
        with self._lock:
            hit = self._store.get(key)
            if hit is not None:
                self.hits += 1
                return hit
        Wm = self.W[keep_mask]
        Gp = pseudoinverse(Wm.T @ Wm, self.tol)
        with self._lock:
            self.misses += 1
            return self._store.setdefault(key, Gp)


def leave_out_projection_row(W, keep_mask, row, cache=None):
    """Row ``row`` of ``I - W_m (W_m' W_m)^+ W_m'`` with ``W_m`` the controls
    whose rows outside ``keep_mask`` are set to zero.

    Entries at masked positions are exactly zero; the kept observation ``row``
    must itself be in the mask.
    """
    Wa = np.asarray(W.W if isinstance(W, ControlMatrix) else W, dtype=float)
    keep_mask = np.asarray(keep_mask, dtype=bool)
    if keep_mask.shape != (Wa.shape[0],):
        raise ValueError("keep_mask must have one entry per observation")
    if not keep_mask[row]:
        raise ValueError("the row's own observation must be kept")
    if cache is None:
        cache = GramCache(Wa)
    Gp = cache.get(keep_mask)
    out = np.zeros(Wa.shape[0])
    out[keep_mask] = -(Wa[keep_mask] @ (Gp @ Wa[row]))
    out[row] += 1.0
    return out
