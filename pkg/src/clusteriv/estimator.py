"""Ratio estimators ``x'Ay / x'Ax`` and the plug-in asymptotic bias of OLS."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .centering import CenteringMatrix, _as_csr
from .errors import DegenerateDenominator, NonFiniteValue, NonpositiveQ
from .exclusion import ClusterPartition
from .projections import ControlMatrix, as_controls, build_projection

DEGENERACY_FACTOR = 1e-10
WEAK_FACTOR = 0.1


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """Observations ``(y, x, W)`` with a cluster partition.

    ``time`` and ``coords`` are optional and only used by exclusion recipes.
    """

    y: np.ndarray
    x: np.ndarray
    W: ControlMatrix = field(repr=False)
    partition: ClusterPartition = field(repr=False)
    time: Optional[np.ndarray] = None
    coords: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.partition.n
        for name in ("y", "x"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (n,):
                raise ValueError(f"{name} must have length {n}, got shape {v.shape}")
            if not np.all(np.isfinite(v)):
                raise NonFiniteValue(f"{name} contains non-finite values")
            object.__setattr__(self, name, v)
        if self.W.n != n:
            raise ValueError(f"W has {self.W.n} rows, expected {n}")
        if self.time is not None and np.shape(self.time) != (n,):
            raise ValueError("time must have one entry per observation")
        if self.coords is not None:
            c = np.asarray(self.coords, dtype=float)
            if c.shape != (n, 2) or not np.all(np.isfinite(c)):
                raise NonFiniteValue("coords must be a finite n x 2 array")
            object.__setattr__(self, "coords", c)

    @classmethod
    def from_arrays(cls, y, x, W, clusters, time=None, coords=None):
        partition = clusters if isinstance(clusters, ClusterPartition) else \
            ClusterPartition.from_labels(clusters)
        W = np.zeros((partition.n, 0)) if W is None else W
        return cls(y=y, x=x, W=as_controls(W), partition=partition,
                   time=None if time is None else np.asarray(time), coords=coords)

    @property
    def n(self):
        return self.partition.n

    def with_outcome(self, y):
        return ClusteredDataset(y=y, x=self.x, W=self.W, partition=self.partition,
                                time=self.time, coords=self.coords)


@dataclass(frozen=True)
class EstimateResult:
    beta_hat: float
    numerator: float
    denominator: float
    effective_sample: float
    mode: str
    method: str
    weak_denominator: bool = False

    def to_dict(self):
        return dict(self.__dict__)


def _check_denominator(den, x, trace):
    n = x.size
    var = float(np.var(x))
    if abs(den) <= DEGENERACY_FACTOR * n * var or den == 0.0:
        raise DegenerateDenominator(
            f"x'Ax = {den:.3g} is degenerate; the centering matrix leaves no identifying variation"
        )
    return abs(den) < WEAK_FACTOR * trace * var


def estimate(data, A):
    """``beta_hat = x'Ay / x'Ax``.

    Raises
    ------
    DegenerateDenominator
        If ``|x'Ax| <= 1e-10 * n * var(x)``.
    """
    As = _as_csr(A)
    x, y = data.x, data.y
    num = float(x @ (As @ y))
    den = float(x @ (As @ x))
    trace = float(As.diagonal().sum())
    weak = _check_denominator(den, x, trace)
    return EstimateResult(
        beta_hat=num / den,
        numerator=num,
        denominator=den,
        effective_sample=trace,
        mode=getattr(A, "mode", "outcome"),
        method=getattr(A, "method", "user"),
        weak_denominator=bool(weak),
    )


def estimate_ols(data, M=None):
    """OLS coefficient after partialling out ``W``."""
    M = build_projection(data.W) if M is None else M
    x = data.x
    num = float(x @ M.apply(data.y))
    den = float(x @ M.apply(x))
    weak = _check_denominator(den, x, M.trace())
    return EstimateResult(num / den, num, den, M.trace(), "outcome", "ols", bool(weak))


def estimate_iv_form(data, A, M=None):
    """IV form ``z'My / z'Mx`` with ``z = A'x``.

    Equal to :func:`estimate` whenever ``AM = A``, so it is only defined for
    outcome and doubly robust centering matrices.
    """
    mode = getattr(A, "mode", "outcome")
    if mode == "design":
        raise ValueError("the IV form relies on AM = A, which design-mode matrices lack")
    M = build_projection(data.W) if M is None else M
    As = _as_csr(A)
    z = As.T @ data.x
    num = float(z @ M.apply(data.y))
    den = float(z @ M.apply(data.x))
    weak = _check_denominator(den, data.x, float(As.diagonal().sum()))
    return EstimateResult(num / den, num, den, float(As.diagonal().sum()), mode, "iv_form",
                          bool(weak))


def nickell_bias_plugin(M, cross_moments, Q, partition=None):
    """Asymptotic OLS bias ``(1/n) sum M[lt, l] E[x_lt e_l] / Q``.

    Parameters
    ----------
    M : ProjectionMatrix
    cross_moments : callable
        Vectorized ``f(lt, l)`` returning ``E[x_lt e_l]`` for integer index
        arrays. Only pairs within a block of ``M`` (and within a cluster when
        ``partition`` is given) are queried; all others are taken to be zero.
    Q : float
        Probability limit of ``x'Mx / n``.
    """
    if not Q > 0:
        raise NonpositiveQ(f"Q must be positive, got {Q}")
    total = 0.0
    lab = None if partition is None else partition.assignment
    for rows, Qb in M.blocks:
        Mb = M.block_dense(rows, Qb)
        a, b = np.meshgrid(rows, rows, indexing="ij")
        a, b, vals = a.ravel(), b.ravel(), Mb.ravel()
        if lab is not None:
            same = lab[a] == lab[b]
            a, b, vals = a[same], b[same], vals[same]
        total += float(vals @ np.asarray(cross_moments(a, b), dtype=float))
    return total / M.n / Q


def ar1_panel_cross_moments(partition, time, beta, sigma2):
    """``E[y_{i,s-1} e_{it}] = beta^(s-1-t) sigma2`` for ``s > t`` in the same unit.

    Observation ``l`` at period ``s`` has regressor ``y_{i,s-1}``.
    """
    lab = partition.assignment
    time = np.asarray(time)

    def moments(lt, l):
        s, t = time[lt], time[l]
        ok = (lab[lt] == lab[l]) & (s > t)
        out = np.zeros(np.shape(lt))
        out[ok] = sigma2 * float(beta) ** (s[ok] - 1 - t[ok])
        return out

    return moments


def ar1_panel_Q(M, time, beta, sigma2):
    """``plim x'Mx / n`` for a stationary AR(1) panel whose controls absorb the
    unit effects: ``(1/n) sum tr(M_c Gamma_c)`` with
    ``Gamma[s, t] = sigma2 beta^|s-t| / (1 - beta^2)``."""
    if not abs(beta) < 1:
        raise ValueError("stationarity requires |beta| < 1")
    time = np.asarray(time, dtype=float)
    total = 0.0
    for rows, Qb in M.blocks:
        tt = time[rows]
        G = sigma2 * beta ** np.abs(tt[:, None] - tt[None, :]) / (1 - beta**2)
        total += float(np.sum(M.block_dense(rows, Qb) * G))
    return total / M.n
