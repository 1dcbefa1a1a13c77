"""Jackknife variance, Anderson-Rubin tests and confidence sets.

The numerator statistic ``Z = x'A(y - x b0)`` is a function of the cluster
data ``D_i = (x_i, U_i)``. Removing cluster ``i`` means replacing ``D_i`` by
zero, so

    Z - Z_(i) = sum_{l in S_i} [(A'x)_l U_l + x_l (AU)_l] - x_i' A_ii U_i,

which is what :class:`JackknifeOperator` evaluates in ``O(nnz(A))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, norm

from .centering import _as_csr, diagnostics
from .errors import DegenerateDenominator
from .estimator import estimate

GUARD = 1e-12
DISC_RTOL = 1e-12


class JackknifeOperator:
    """Precomputed pieces of ``A`` for repeated leave-one-cluster-out deltas."""

    def __init__(self, A, partition):
        self.A = _as_csr(A)
        self.AT = self.A.T.tocsr()
        self.partition = partition
        lab = partition.assignment
        coo = self.A.tocoo()
        own = lab[coo.row] == lab[coo.col]
        self._r, self._c, self._v = coo.row[own], coo.col[own], coo.data[own]
        self._lab_r = lab[self._r]
        self.block_diagonal = bool(own.all())

    def _sum(self, w):
        return np.bincount(self.partition.assignment, weights=w, minlength=self.partition.N)

    def deltas(self, x, U):
        """``Z - Z_(i)`` for every cluster."""
        own = np.bincount(self._lab_r, weights=x[self._r] * self._v * U[self._c],
                          minlength=self.partition.N)
        return self._sum((self.AT @ x) * U + x * (self.A @ U)) - own

    def scores(self, x, U):
        """Cluster sums of ``x_l (AU)_l``, the conventional cluster scores."""
        return self._sum(x * (self.A @ U))

    def deltas_by_zeroing(self, x, U):
        """Reference implementation: recompute ``Z`` with each cluster zeroed."""
        z = float(x @ (self.A @ U))
        out = np.empty(self.partition.N)
        for i, idx in enumerate(self.partition.groups()):
            x0, U0 = x.copy(), U.copy()
            x0[idx] = 0.0
            U0[idx] = 0.0
            out[i] = z - float(x0 @ (self.A @ U0))
        return out


@dataclass(frozen=True, eq=False)
class NumeratorStatistic:
    z_value: float
    per_cluster_deltas: np.ndarray = field(repr=False)
    cluster_scores: np.ndarray = field(repr=False)
    beta0: float = 0.0


@dataclass(frozen=True)
class ConfidenceSet:
    """``bounded_interval`` is ``[lo, hi]``; ``complement_of_interval`` is
    ``(-inf, lo] U [hi, inf)``, where one endpoint may be infinite to encode a
    half-line; ``whole_line`` has no endpoints."""

    kind: str
    endpoints: tuple
    level: float

    def contains(self, beta, rtol=1e-9):
        tol = rtol * max(1.0, abs(beta))
        if self.kind == "whole_line":
            return True
        lo, hi = self.endpoints
        if self.kind == "bounded_interval":
            return lo - tol <= beta <= hi + tol
        return beta <= lo + tol or beta >= hi - tol

    def to_dict(self):
        return {"kind": self.kind, "endpoints": [float(e) for e in self.endpoints],
                "level": self.level}


def _operator(A, data, op):
    return op if op is not None else JackknifeOperator(A, data.partition)


def numerator_stat(data, A, beta0, method="expansion", op=None):
    op = _operator(A, data, op)
    U = data.y - data.x * beta0
    if method == "expansion":
        d = op.deltas(data.x, U)
    elif method == "zeroing":
        d = op.deltas_by_zeroing(data.x, U)
    else:
        raise ValueError(f"unknown method {method!r}")
    z = float(data.x @ (op.A @ U))
    return NumeratorStatistic(z_value=z, per_cluster_deltas=d,
                              cluster_scores=op.scores(data.x, U), beta0=float(beta0))


def jackknife_variance(stat):
    return float(np.sum(stat.per_cluster_deltas**2))


def cluster_robust_variance(stat):
    """Sum of squared cluster scores; omits cross-cluster quadratic covariance."""
    return float(np.sum(stat.cluster_scores**2))


@dataclass(frozen=True)
class ARTest:
    statistic: float
    critical_value: float
    reject: bool
    z_value: float
    variance: float


def _ar_ratio(z, v):
    if v > 0:
        return z * z / v
    return 0.0 if z == 0 else math.inf


def ar_test(data, A, beta0, alpha=0.05, op=None):
    stat = numerator_stat(data, A, beta0, op=op)
    v = jackknife_variance(stat)
    s = _ar_ratio(stat.z_value, v)
    crit = float(chi2.ppf(1 - alpha, 1))
    return ARTest(statistic=s, critical_value=crit, reject=bool(s > crit),
                  z_value=stat.z_value, variance=v)


def ar_quadratic(data, A, alpha=0.05, op=None):
    """Coefficients ``(Pa, Pb, Pc)`` of ``P(b0) = (a - b b0)^2 - q V(b0)``."""
    op = _operator(A, data, op)
    x, y = data.x, data.y
    a = float(x @ (op.A @ y))
    b = float(x @ (op.A @ x))
    c = op.deltas(x, y)
    d = op.deltas(x, x)
    q = float(chi2.ppf(1 - alpha, 1))
    sdd, scd, scc = float(d @ d), float(c @ d), float(c @ c)
    Pa = b * b - q * sdd
    Pb = -2 * a * b + 2 * q * scd
    Pc = a * a - q * scc
    return Pa, Pb, Pc, max(b * b, q * sdd), max(abs(a * b), q * abs(scd))


def _roots(Pa, Pb, Pc):
    disc = max(Pb * Pb - 4 * Pa * Pc, 0.0)
    sq = math.sqrt(disc)
    # numerically stable pair of roots
    t = -0.5 * (Pb + math.copysign(sq, Pb)) if Pb != 0 else 0.5 * sq
    if t == 0.0:
        r = math.sqrt(max(-Pc / Pa, 0.0))
        return -r, r
    r1, r2 = t / Pa, Pc / t
    return min(r1, r2), max(r1, r2)


def invert_ar(data, A, alpha=0.05, op=None):
    """All ``b0`` not rejected by the AR test at level ``alpha``."""
    Pa, Pb, Pc, scale_a, scale_b = ar_quadratic(data, A, alpha, op)
    level = 1 - alpha
    if abs(Pa) <= GUARD * scale_a:
        # the quadratic degenerates to a linear inequality Pb * b0 + Pc <= 0
        if abs(Pb) <= GUARD * scale_b:
            if Pc <= 0:
                return ConfidenceSet("whole_line", (), level)
            raise DegenerateDenominator("no identifying variation: AR rejects every value")
        r = -Pc / Pb
        ends = (r, math.inf) if Pb > 0 else (-math.inf, r)
        return ConfidenceSet("complement_of_interval", ends, level)
    disc = Pb * Pb - 4 * Pa * Pc
    if Pa > 0:
        return ConfidenceSet("bounded_interval", _roots(Pa, Pb, Pc), level)
    # a near-double root with Pa < 0 is a rounding artifact of Pb^2 - 4 Pa Pc;
    # P(beta_hat) = -q V(beta_hat) <= 0, so the set is the whole line
    if disc <= DISC_RTOL * max(Pb * Pb, 4 * abs(Pa * Pc)):
        return ConfidenceSet("whole_line", (), level)
    return ConfidenceSet("complement_of_interval", _roots(Pa, Pb, Pc), level)


def tstat_interval(data, A, alpha=0.05, op=None):
    """Wald interval ``beta_hat +- z sqrt(V(beta_hat)) / |x'Ax|``; not robust to
    weak identification."""
    est = estimate(data, A)
    stat = numerator_stat(data, A, est.beta_hat, op=op)
    se = math.sqrt(jackknife_variance(stat)) / abs(est.denominator)
    zq = float(norm.ppf(1 - alpha / 2)) if alpha < 1 else 0.0
    return ConfidenceSet("bounded_interval", (est.beta_hat - zq * se, est.beta_hat + zq * se),
                         1 - alpha)


def ar_curve(data, A, grid=None, points=401, width=10.0, op=None):
    """AR statistic on a grid of hypothesized values.

    The default grid spans ``beta_hat +- width * SE`` with ``points`` values.
    Returns ``(grid, statistics)``.
    """
    op = _operator(A, data, op)
    if grid is None:
        est = estimate(data, op.A)
        se = math.sqrt(jackknife_variance(numerator_stat(data, op.A, est.beta_hat, op=op)))
        se /= abs(est.denominator)
        half = width * se if se > 0 else width * max(1.0, abs(est.beta_hat))
        grid = np.linspace(est.beta_hat - half, est.beta_hat + half, points)
    grid = np.asarray(grid, dtype=float)
    x, y = data.x, data.y
    a = float(x @ (op.A @ y))
    b = float(x @ (op.A @ x))
    c, d = op.deltas(x, y), op.deltas(x, x)
    z = a - b * grid
    V = ((c[None, :] - d[None, :] * grid[:, None]) ** 2).sum(axis=1)
    stats = np.array([_ar_ratio(zi, vi) for zi, vi in zip(z, V)])
    return grid, stats


@dataclass
class InferenceReport:
    beta_hat: float
    trace_A: float
    V_jk: float
    V_cr: float
    ar_set: ConfidenceSet
    t_interval: ConfidenceSet
    diagnostics: dict
    weak_denominator: bool = False

    def to_dict(self):
        return {
            "beta_hat": self.beta_hat,
            "trace_A": self.trace_A,
            "V_jk": self.V_jk,
            "V_cr": self.V_cr,
            "ar_set": self.ar_set.to_dict(),
            "t_interval": self.t_interval.to_dict(),
            "weak_denominator": self.weak_denominator,
            "diagnostics": self.diagnostics,
        }

    def to_json(self, **kw):
        return json.dumps(_jsonable(self.to_dict()), **kw)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def infer(data, A, alpha=0.05):
    """Estimate, jackknife and cluster-robust variances, AR and t sets."""
    op = JackknifeOperator(A, data.partition)
    est = estimate(data, op.A)
    stat = numerator_stat(data, op.A, est.beta_hat, op=op)
    return InferenceReport(
        beta_hat=est.beta_hat,
        trace_A=est.effective_sample,
        V_jk=jackknife_variance(stat),
        V_cr=cluster_robust_variance(stat),
        ar_set=invert_ar(data, op.A, alpha, op=op),
        t_interval=tstat_interval(data, op.A, alpha, op=op),
        diagnostics=diagnostics(op.A, data.partition).to_dict(),
        weak_denominator=est.weak_denominator,
    )
