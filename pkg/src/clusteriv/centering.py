"""Optimal centering matrices.

``A*`` is the Frobenius-nearest matrix to ``M`` among matrices that partial
out the controls and vanish on the zero pairs of the exclusion pattern. Three
independent constructions are provided and agree to rounding error:

* :func:`build_astar_vec_oracle` projects ``vec(M)`` onto the null space of the
  stacked linear constraints (small ``n`` only);
* :func:`build_astar_blockB` solves, row by row, the small system on the
  submatrix of ``M`` indexed by the excluded observations;
* :func:`build_astar_leaveout` takes each row from the projection fitted on
  the observations whose errors are uncorrelated with that row's regressor.

The last one is the production path. The two production-grade builders work
per connected component of the controls (see :mod:`clusteriv.projections`),
and reuse results across components with identical controls and zero pattern.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.sparse import coo_array, csr_array, issparse, vstack
from scipy.sparse.csgraph import connected_components

from .errors import InvalidExclusion, OracleTooLarge
from .exclusion import validate as validate_exclusion
from .projections import (
    GramCache,
    as_controls,
    build_projection,
    leave_out_projection_row,
    pseudoinverse,
)

MODES = ("outcome", "design", "doubly_robust")
ORACLE_SIZE_LIMIT = 200
CLASS_TOL = 1e-8
# Woodbury updates are only used when the excluded block of M is well
# conditioned; otherwise the masked Gram pseudoinverse is formed directly.
WOODBURY_MIN_EIG = 1e-6


@dataclass(frozen=True, eq=False)
class CenteringMatrix:
    A: csr_array = field(repr=False)
    mode: str = "outcome"
    method: str = "leaveout"

    @property
    def n(self):
        return self.A.shape[0]

    def dense(self):
        return self.A.toarray()

    def trace(self):
        return float(self.A.diagonal().sum())

    def __matmul__(self, v):
        return self.A @ v

    def transpose(self):
        return self.A.T.tocsr()


def _as_csr(A):
    if isinstance(A, CenteringMatrix):
        return A.A
    if issparse(A):
        return csr_array(A)
    return csr_array(np.asarray(A, dtype=float))


def _check_exclusion(e):
    report = validate_exclusion(e)
    if not report.ok:
        raise InvalidExclusion("; ".join(report.violations))


def _assemble(n, pieces):
    if pieces:
        r = np.concatenate([p[0] for p in pieces])
        c = np.concatenate([p[1] for p in pieces])
        v = np.concatenate([p[2] for p in pieces])
    else:
        r = c = np.empty(0, dtype=np.int64)
        v = np.empty(0)
    nz = v != 0.0
    A = coo_array((v[nz], (r[nz], c[nz])), shape=(n, n)).tocsr()
    A.sort_indices()
    return A


def _excluded_lists(lr, lc, size):
    """Group local zero pairs by row."""
    out = [None] * size
    if lr.size:
        order = np.lexsort((lc, lr))
        lr, lc = lr[order], lc[order]
        bounds = np.flatnonzero(np.diff(lr)) + 1
        for rr, cc in zip(np.split(lr, bounds), np.split(lc, bounds)):
            out[int(rr[0])] = cc
    return out


def _per_component(M, e, solve_block):
    """Run ``solve_block(Wc, Q, excluded)`` on each component and
    assemble the global sparse result, caching identical blocks."""
    W = M.source
    cache = {}
    pieces = []
    for (rows, Q), (_, cols) in zip(M.blocks, W.components):
        lr, lc = e.restrict(rows)
        Wc = W.block(rows, cols)
        key = (Wc.shape, Wc.tobytes(), lr.tobytes(), lc.tobytes())
        block = cache.get(key)
        if block is None:
            block = solve_block(Wc, Q, _excluded_lists(lr, lc, rows.size))
            cache[key] = block
        ii, jj = np.nonzero(block)
        pieces.append((rows[ii], rows[jj], block[ii, jj]))
    return _assemble(M.n, pieces)


def build_astar_vec_oracle(M, e, mode="outcome", size_limit=ORACLE_SIZE_LIMIT):
    """Exact projection of ``vec(M)`` onto the constraint null space.

    The constraint matrix stacks one selector row per zero pair and the
    ``vec`` form of ``AW = 0`` (outcome), ``W'A = 0`` (design) or both.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    M = M if hasattr(M, "blocks") else build_projection(M)
    n = M.n
    if n > size_limit:
        raise OracleTooLarge(f"vec oracle limited to n <= {size_limit}, got {n}")
    _check_exclusion(e)
    W = M.source.W
    K = W.shape[1]
    Md = M.dense()

    # A is flattened row-major: entry (r, c) sits at r * n + c
    blocks = []
    if e.L:
        idx = e.rows * n + e.cols
        blocks.append(coo_array((np.ones(e.L), (np.arange(e.L), idx)), shape=(e.L, n * n)))
    if K and mode in ("outcome", "doubly_robust"):
        # (A W)[r, k] = sum_c A[r, c] W[c, k]
        r, c, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(K), indexing="ij")
        vals = W[c, k].ravel()
        blocks.append(
            coo_array((vals, ((r * K + k).ravel(), (r * n + c).ravel())), shape=(n * K, n * n))
        )
    if K and mode in ("design", "doubly_robust"):
        # (W' A)[k, c] = sum_r W[r, k] A[r, c]
        r, c, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(K), indexing="ij")
        vals = W[r, k].ravel()
        blocks.append(
            coo_array((vals, ((c * K + k).ravel(), (r * n + c).ravel())), shape=(n * K, n * n))
        )
    vecM = Md.ravel()
    if not blocks:
        vecA = vecM
    else:
        Lmat = vstack(blocks).tocsr()
        gram = (Lmat @ Lmat.T).tocsr()
        rhs = Lmat @ vecM
        lam = np.zeros_like(rhs)
        # (LL')^+ is block diagonal over the connected components of LL'
        _, comp = connected_components(gram, directed=False)
        order = np.argsort(comp, kind="stable")
        for idx in np.split(order, np.flatnonzero(np.diff(comp[order])) + 1):
            G = gram[idx][:, idx].toarray()
            lam[idx] = np.linalg.pinv(G, rcond=1e-12, hermitian=True) @ rhs[idx]
        vecA = vecM - Lmat.T @ lam
    A = vecA.reshape(n, n)
    return CenteringMatrix(A=_assemble(n, [np.nonzero(A) + (A[np.nonzero(A)],)]), mode=mode,
                           method="vec_oracle")


def build_astar_blockB(M, e, return_B=False):
    """``A* = (I - B) M`` with ``B`` supported on the zero pairs.

    For a row with excluded set ``E``, ``B[row, E] = M[row, E] M[E, E]^+``.
    """
    M = M if hasattr(M, "blocks") else build_projection(M)
    _check_exclusion(e)
    B_pieces = []

    def solve(Wc, Q, excluded):
        Mc = np.eye(Q.shape[0]) - Q @ Q.T
        out = Mc.copy()
        Bc = np.zeros_like(Mc)
        for r, E in enumerate(excluded):
            if E is None:
                continue
            b = Mc[r, E] @ pseudoinverse(Mc[np.ix_(E, E)])
            Bc[r, E] = b
            out[r] = Mc[r] - b @ Mc[E]
        if return_B:
            B_pieces.append(Bc)
        return out

    if return_B:
        # B is needed per component, so bypass the block cache
        pieces, bpieces = [], []
        W = M.source
        for (rows, Q), (_, cols) in zip(M.blocks, W.components):
            lr, lc = e.restrict(rows)
            blk = solve(W.block(rows, cols), Q, _excluded_lists(lr, lc, rows.size))
            ii, jj = np.nonzero(blk)
            pieces.append((rows[ii], rows[jj], blk[ii, jj]))
            Bc = B_pieces.pop()
            bi, bj = np.nonzero(Bc)
            bpieces.append((rows[bi], rows[bj], Bc[bi, bj]))
        A = CenteringMatrix(A=_assemble(M.n, pieces), mode="outcome", method="blockB")
        return A, _assemble(M.n, bpieces)
    return CenteringMatrix(A=_per_component(M, e, solve), mode="outcome", method="blockB")


def _leaveout_block(Wc, Q, excluded, engine):
    T, k = Wc.shape
    out = np.eye(T) - Q @ Q.T
    if k == 0:
        return out
    cache = GramCache(Wc)
    chol = scipy.linalg.cho_factor(Wc.T @ Wc) if engine != "direct" else None
    for r, E in enumerate(excluded):
        if E is None:
            continue
        keep = np.ones(T, dtype=bool)
        keep[E] = False
        row = None
        if chol is not None:
            U = Wc[E]
            GU = scipy.linalg.cho_solve(chol, U.T)
            S = np.eye(E.size) - U @ GU
            S = 0.5 * (S + S.T)
            if np.linalg.eigvalsh(S)[0] > WOODBURY_MIN_EIG:
                w = Wc[r]
                h = scipy.linalg.cho_solve(chol, w) + GU @ np.linalg.solve(S, GU.T @ w)
                row = np.zeros(T)
                row[keep] = -(Wc[keep] @ h)
                row[r] += 1.0
        if row is None:
            row = leave_out_projection_row(Wc, keep, r, cache)
        row[E] = 0.0
        out[r] = row
    return out


def build_astar_leaveout(W, e, engine="auto"):
    """Row ``l`` of ``A*`` is row ``l`` of the leave-out projection fitted on the
    observations kept by row ``l`` of the exclusion pattern, with excluded
    entries set to zero.

    ``engine="direct"`` always forms the masked Gram pseudoinverse;
    ``"auto"`` uses a Woodbury downdate of ``(W'W)^{-1}`` when the masked Gram
    is safely nonsingular.
    """
    M = W if hasattr(W, "blocks") else build_projection(as_controls(W))
    _check_exclusion(e)
    if engine not in ("auto", "direct"):
        raise ValueError(f"unknown engine {engine!r}")
    A = _per_component(M, e, lambda Wc, Q, ex: _leaveout_block(Wc, Q, ex, engine))
    return CenteringMatrix(A=A, mode="outcome", method="leaveout")


def design_mode_astar(M, e, method="leaveout"):
    """Nearest class member under ``MA = A``: the transpose of the outcome-mode
    solution for the transposed zero pattern."""
    M = M if hasattr(M, "blocks") else build_projection(M)
    et = e.transpose()
    if method == "leaveout":
        out = build_astar_leaveout(M, et)
    elif method == "blockB":
        out = build_astar_blockB(M, et)
    elif method == "vec_oracle":
        return build_astar_vec_oracle(M, e, mode="design")
    else:
        raise ValueError(f"unknown method {method!r}")
    return CenteringMatrix(A=out.A.T.tocsr(), mode="design", method=method)


def build_astar(W, e, mode="outcome", method="leaveout"):
    """Build ``A*`` for the requested modelling mode."""
    M = W if hasattr(W, "blocks") else build_projection(as_controls(W))
    if mode == "design":
        return design_mode_astar(M, e, method=method)
    if mode == "doubly_robust" or method == "vec_oracle":
        return build_astar_vec_oracle(M, e, mode=mode)
    if mode != "outcome":
        raise ValueError(f"unknown mode {mode!r}")
    if method == "leaveout":
        return build_astar_leaveout(M, e)
    if method == "blockB":
        return build_astar_blockB(M, e)
    raise ValueError(f"unknown method {method!r}")


def design_instrument(x, W, e):
    """Instrument for design-based estimation.

    ``z[l]`` is the ``l``-th residual from regressing ``x`` on ``W`` using only
    observations ``k`` with ``E[k, l] = 1``.
    """
    M = W if hasattr(W, "blocks") else build_projection(as_controls(W))
    Wctl = M.source
    x = np.asarray(x, dtype=float)
    et = e.transpose()
    z = M.apply(x)
    for rows, cols in Wctl.components:
        lr, lc = et.restrict(rows)
        if not lr.size:
            continue
        Wc = Wctl.block(rows, cols)
        cache = GramCache(Wc)
        for r, E in enumerate(_excluded_lists(lr, lc, rows.size)):
            if E is None:
                continue
            keep = np.ones(rows.size, dtype=bool)
            keep[E] = False
            z[rows[r]] = leave_out_projection_row(Wc, keep, r, cache) @ x[rows]
    return z


@dataclass
class ClassReport:
    pop: float
    pop_design: float
    cc_max: float
    cc_violations: list
    mode: str
    tol: float = CLASS_TOL

    @property
    def ok(self):
        pop_ok = {
            "outcome": self.pop <= self.tol,
            "design": self.pop_design <= self.tol,
            "doubly_robust": self.pop <= self.tol and self.pop_design <= self.tol,
        }[self.mode]
        return pop_ok and self.cc_max <= self.tol


def validate_class(A, W, e, mode=None, tol=CLASS_TOL):
    """Numerical check of the partialling-out and zero constraints.

    ``pop`` is ``||A W||_F / ||W||_F`` and ``pop_design`` is
    ``||W' A||_F / ||W||_F``; ``cc_violations`` lists zero pairs where
    ``|A| > tol``.
    """
    if mode is None:
        mode = A.mode if isinstance(A, CenteringMatrix) else "outcome"
    As = _as_csr(A)
    Wa = as_controls(W).W if not hasattr(W, "blocks") else W.source.W
    wn = np.linalg.norm(Wa)
    if wn == 0.0:
        pop = pop_d = 0.0
    else:
        pop = float(np.linalg.norm(As @ Wa) / wn)
        pop_d = float(np.linalg.norm(As.T @ Wa) / wn)
    vals = np.abs(As[e.rows, e.cols]) if e.L else np.empty(0)
    bad = np.flatnonzero(vals > tol)
    return ClassReport(
        pop=pop,
        pop_design=pop_d,
        cc_max=float(vals.max()) if vals.size else 0.0,
        cc_violations=[(int(e.rows[i]), int(e.cols[i])) for i in bad],
        mode=mode,
        tol=tol,
    )


@dataclass
class CenteringDiagnostics:
    trace: float
    frob_sq_total: float
    frob_sq_diag_blocks: float
    frob_sq_offdiag_blocks: float
    offdiag_ratio: float
    offdiag_share: float
    operator_norm_estimate: float
    per_cluster_trace: np.ndarray
    lemma6_ratios: dict

    def to_dict(self):
        d = dict(self.__dict__)
        d["per_cluster_trace"] = self.per_cluster_trace.tolist()
        return d


def operator_norm(A, iters=50, tol=1e-8, seed=0):
    """Spectral norm by power iteration on ``A'A``."""
    As = _as_csr(A)
    n = As.shape[1]
    if As.nnz == 0:
        return 0.0
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        u = As.T @ (As @ v)
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = u / nu
        new = np.sqrt(nu)
        if abs(new - est) <= tol * max(new, 1.0):
            est = new
            break
        est = new
    return float(est)


def diagnostics(A, partition):
    As = _as_csr(A).tocoo()
    lab = partition.assignment
    same = lab[As.row] == lab[As.col]
    sq = As.data**2
    diag_sq = float(sq[same].sum())
    off_sq = float(sq[~same].sum())
    on_diag = As.row == As.col
    per_cluster = np.bincount(lab[As.row[on_diag]], weights=As.data[on_diag],
                              minlength=partition.N)
    n = partition.n
    tmax = float(partition.sizes.max())
    return CenteringDiagnostics(
        trace=float(per_cluster.sum()),
        frob_sq_total=diag_sq + off_sq,
        frob_sq_diag_blocks=diag_sq,
        frob_sq_offdiag_blocks=off_sq,
        offdiag_ratio=float(np.sqrt(off_sq / diag_sq)) if diag_sq > 0 else 0.0,
        offdiag_share=off_sq / (diag_sq + off_sq) if diag_sq + off_sq > 0 else 0.0,
        operator_norm_estimate=operator_norm(As),
        per_cluster_trace=per_cluster,
        lemma6_ratios={
            "max_Ti_over_n": tmax / n,
            "max_Ti2_over_n": tmax**2 / n,
            "max_Ti4_over_n": tmax**4 / n,
        },
    )


def export_dense_csv(A, path):
    np.savetxt(path, _as_csr(A).toarray(), delimiter=",", fmt="%.17g")


def export_triplets(A, path, threshold=0.01):
    """Write entries with ``|value| > threshold`` as ``row,col,value`` lines."""
    As = _as_csr(A).tocoo()
    keep = np.abs(As.data) > threshold
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value"])
        for r, c, v in zip(As.row[keep], As.col[keep], As.data[keep]):
            w.writerow([int(r), int(c), repr(float(v))])
    return int(keep.sum())


def read_triplets(path, n):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    r = np.array([int(t["row"]) for t in rows], dtype=np.int64)
    c = np.array([int(t["col"]) for t in rows], dtype=np.int64)
    v = np.array([float(t["value"]) for t in rows])
    return coo_array((v, (r, c)), shape=(n, n)).tocsr()
