"""Cluster partitions and exclusion-restriction patterns.

An exclusion matrix ``E`` is stored as its set of zero pairs ``(row, col)``:
``E[row, col] = 0`` means no restriction ``E[x_row e_col] = 0`` is imposed.
Cross-cluster entries are always one, so only within-cluster pairs are kept.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_array
from scipy.spatial.distance import cdist

from .errors import CrossClusterEdge

EARTH_RADIUS_KM = 6371.0088


@dataclass(frozen=True, eq=False)
class ClusterPartition:
    """Assignment of each observation to one of ``N`` clusters.

    Labels are normalized to ``0..N-1`` in order of first appearance.
    """

    assignment: np.ndarray
    sizes: np.ndarray = field(repr=False)

    @classmethod
    def from_labels(cls, labels):
        labels = np.asarray(labels)
        if labels.ndim != 1 or labels.size == 0:
            raise ValueError("cluster labels must be a non-empty vector")
        _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
        # relabel by first appearance so ids follow the data order
        rank = np.empty(first.size, dtype=np.int64)
        rank[np.argsort(first)] = np.arange(first.size)
        assignment = rank[inverse].astype(np.int64)
        assignment.setflags(write=False)
        sizes = np.bincount(assignment)
        sizes.setflags(write=False)
        return cls(assignment=assignment, sizes=sizes)

    @property
    def n(self):
        return self.assignment.size

    @property
    def N(self):
        return self.sizes.size

    def members(self, i):
        return np.flatnonzero(self.assignment == i)

    def groups(self):
        """List of index arrays, one per cluster, in cluster order."""
        order = np.argsort(self.assignment, kind="stable")
        return np.split(order, np.cumsum(self.sizes)[:-1])

    def indicator(self):
        """Sparse ``n x N`` cluster membership matrix."""
        return csr_array(
            (np.ones(self.n), (np.arange(self.n), self.assignment)),
            shape=(self.n, self.N),
        )


@dataclass(frozen=True, eq=False)
class ExclusionMatrix:
    """Zero pattern of an exclusion-restriction matrix.

    Construction does not enforce the invariants so that :func:`validate` can
    report on arbitrary input; every builder in this module produces a valid
    pattern.
    """

    rows: np.ndarray
    cols: np.ndarray
    partition: ClusterPartition = field(repr=False)

    @classmethod
    def from_pairs(cls, partition, pairs):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.size:
            pairs = np.unique(pairs, axis=0)
        rows = np.ascontiguousarray(pairs[:, 0])
        cols = np.ascontiguousarray(pairs[:, 1])
        rows.setflags(write=False)
        cols.setflags(write=False)
        return cls(rows=rows, cols=cols, partition=partition)

    @property
    def n(self):
        return self.partition.n

    @property
    def L(self):
        """Number of zero restrictions imposed on a centering matrix."""
        return int(self.rows.size)

    def pairs(self):
        return set(zip(self.rows.tolist(), self.cols.tolist()))

    def zero_indicator(self):
        """Sparse boolean ``n x n`` matrix with ones at the zero pairs."""
        return csr_array(
            (np.ones(self.L, dtype=bool), (self.rows, self.cols)), shape=(self.n, self.n)
        )

    def dense(self):
        """The 0/1 matrix ``E`` itself (small ``n`` only)."""
        E = np.ones((self.n, self.n), dtype=np.int8)
        E[self.rows, self.cols] = 0
        return E

    def excluded(self, row):
        """Observations ``l`` with ``E[row, l] = 0``."""
        lo, hi = np.searchsorted(self.rows, [row, row + 1])
        return self.cols[lo:hi]

    def keep_mask(self, row):
        mask = np.ones(self.n, dtype=bool)
        mask[self.excluded(row)] = False
        return mask

    def transpose(self):
        return ExclusionMatrix.from_pairs(
            self.partition, np.column_stack([self.cols, self.rows])
        )

    def is_symmetric(self):
        return self.pairs() == self.transpose().pairs()

    def restrict(self, idx):
        """Zero pairs among ``idx`` in local coordinates of ``idx``.

        Pairs with one end outside ``idx`` are dropped.
        """
        idx = np.asarray(idx)
        local = np.full(self.n, -1, dtype=np.int64)
        local[idx] = np.arange(idx.size)
        r, c = local[self.rows], local[self.cols]
        keep = (r >= 0) & (c >= 0)
        return r[keep], c[keep]

    def __eq__(self, other):
        if not isinstance(other, ExclusionMatrix):
            return NotImplemented
        return self.n == other.n and self.pairs() == other.pairs()

    __hash__ = None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row_index", "col_index"])
            w.writerows(zip(self.rows.tolist(), self.cols.tolist()))


def _within_cluster_pairs(partition, rule):
    """Collect ordered pairs ``(a, b)`` in the same cluster with ``rule``."""
    out = []
    for members in partition.groups():
        if members.size < 2:
            continue
        a, b = np.meshgrid(members, members, indexing="ij")
        hit = rule(a, b) & (a != b)
        out.append(np.column_stack([a[hit], b[hit]]))
    if not out:
        return np.empty((0, 2), dtype=np.int64)
    return np.concatenate(out)


def strict_exogeneity(partition):
    """All restrictions imposed: no zero pairs."""
    return ExclusionMatrix.from_pairs(partition, np.empty((0, 2)))


def contemporaneous_only(partition):
    """Only ``E[x_l e_l] = 0``: every within-cluster off-diagonal entry is zero."""
    pairs = _within_cluster_pairs(partition, lambda a, b: np.ones(a.shape, dtype=bool))
    return ExclusionMatrix.from_pairs(partition, pairs)


def from_weak_exogeneity(partition, time):
    """Errors may feed back into strictly later regressors.

    ``E[a, b] = 0`` iff ``a`` and ``b`` share a cluster and ``time[a] > time[b]``.
    """
    time = np.asarray(time)
    pairs = _within_cluster_pairs(partition, lambda a, b: time[a] > time[b])
    return ExclusionMatrix.from_pairs(partition, pairs)


def from_limited_feedback(partition, time, horizon):
    """Feedback reaching at most ``horizon`` periods ahead."""
    if horizon < 1:
        raise ValueError("horizon must be a positive integer")
    time = np.asarray(time)

    def rule(a, b):
        lag = time[a] - time[b]
        return (lag >= 1) & (lag <= horizon)

    return ExclusionMatrix.from_pairs(partition, _within_cluster_pairs(partition, rule))


def _haversine_km(p, q):
    lat1, lon1 = np.radians(p[:, 0])[:, None], np.radians(p[:, 1])[:, None]
    lat2, lon2 = np.radians(q[:, 0])[None, :], np.radians(q[:, 1])[None, :]
    h = (
        np.sin((lat2 - lat1) / 2) ** 2
        + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    )
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def from_distance_cutoff(partition, coords, radius_km, great_circle=False):
    """Drop the restriction between same-cluster units closer than ``radius_km``.

    Planar Euclidean distance by default; ``great_circle=True`` reads
    ``coords`` as (latitude, longitude) in degrees. A pair exactly at the
    radius keeps its restriction.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.shape != (partition.n, 2) or not np.all(np.isfinite(coords)):
        raise ValueError("coords must be a finite n x 2 array")
    if radius_km < 0:
        raise ValueError("radius must be nonnegative")
    out = []
    for members in partition.groups():
        if members.size < 2:
            continue
        pts = coords[members]
        D = _haversine_km(pts, pts) if great_circle else cdist(pts, pts)
        a, b = np.nonzero(D < radius_km)
        off = a != b
        out.append(np.column_stack([members[a[off]], members[b[off]]]))
    pairs = np.concatenate(out) if out else np.empty((0, 2), dtype=np.int64)
    return ExclusionMatrix.from_pairs(partition, pairs)


def from_adjacency(partition, edges):
    """Zero pattern equal to the (symmetrized) adjacency of a within-cluster graph."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    lab = partition.assignment
    if edges.size:
        bad = lab[edges[:, 0]] != lab[edges[:, 1]]
        if np.any(bad):
            a, b = edges[np.argmax(bad)]
            raise CrossClusterEdge(f"edge ({a}, {b}) spans two clusters")
        edges = edges[edges[:, 0] != edges[:, 1]]
    pairs = np.concatenate([edges, edges[:, ::-1]])
    return ExclusionMatrix.from_pairs(partition, pairs)


def read_pairs_csv(path, partition):
    """Load explicit zero pairs from a CSV with ``row_index,col_index`` columns."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"row_index", "col_index"} <= set(reader.fieldnames):
            raise ValueError("pairs file needs row_index and col_index columns")
        pairs = [(int(r["row_index"]), int(r["col_index"])) for r in reader]
    return ExclusionMatrix.from_pairs(partition, pairs)


@dataclass
class ExclusionReport:
    violations: list
    L: int
    zero_density: np.ndarray

    @property
    def ok(self):
        return not self.violations


def validate(e, partition=None):
    """Check the invariants of an exclusion pattern; never raises."""
    partition = e.partition if partition is None else partition
    n = partition.n
    violations = []
    rows, cols = e.rows, e.cols
    in_range = (rows >= 0) & (rows < n) & (cols >= 0) & (cols < n)
    if not in_range.all():
        violations.append(f"{int((~in_range).sum())} index pair(s) out of range")
    rows, cols = rows[in_range], cols[in_range]
    if np.any(rows == cols):
        violations.append("diagonal must be 1")
    lab = partition.assignment
    if np.any(lab[rows] != lab[cols]):
        violations.append("cross-cluster entries forced to 1")
    if e.rows.size and np.unique(np.column_stack([e.rows, e.cols]), axis=0).shape[0] != e.rows.size:
        violations.append("duplicate zero pairs")
    counts = np.bincount(lab[rows], minlength=partition.N).astype(float)
    density = counts / partition.sizes.astype(float) ** 2
    return ExclusionReport(violations=violations, L=e.L, zero_density=density)


RECIPES = ("strict", "contemporaneous", "weak_exogeneity", "limited_feedback", "distance",
           "adjacency", "pairs")


def from_recipe(recipe, partition, time=None, coords=None):
    """Build an exclusion pattern from a small declarative record.

    ``recipe`` is a mapping with a ``kind`` key (one of :data:`RECIPES`) plus
    the builder's parameters: ``horizon`` for limited feedback, ``radius`` and
    optionally ``great_circle`` for distance cutoffs, ``edges`` for adjacency
    and ``path`` for an explicit pairs file.
    """
    if isinstance(recipe, str):
        recipe = {"kind": recipe}
    kind = recipe.get("kind")
    if kind == "strict":
        return strict_exogeneity(partition)
    if kind == "contemporaneous":
        return contemporaneous_only(partition)
    if kind in ("weak_exogeneity", "limited_feedback"):
        if time is None:
            raise ValueError(f"recipe {kind!r} needs a time index")
        if kind == "weak_exogeneity":
            return from_weak_exogeneity(partition, time)
        return from_limited_feedback(partition, time, int(recipe.get("horizon", 1)))
    if kind == "distance":
        if coords is None:
            raise ValueError("distance recipe needs coordinates")
        return from_distance_cutoff(partition, coords, float(recipe["radius"]),
                                    great_circle=bool(recipe.get("great_circle", False)))
    if kind == "adjacency":
        return from_adjacency(partition, recipe["edges"])
    if kind == "pairs":
        return read_pairs_csv(recipe["path"], partition)
    raise ValueError(f"unknown exclusion recipe {kind!r}; expected one of {RECIPES}")
