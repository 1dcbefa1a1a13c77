import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.linalg import null_space

from clusteriv.exclusion import ClusterPartition, ExclusionMatrix

settings.register_profile(
    "default", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def panel(N, T):
    """Balanced panel: labels, 1-based time and cluster dummies."""
    labels = np.repeat(np.arange(N), T)
    time = np.tile(np.arange(1, T + 1), N)
    D = np.zeros((N * T, N))
    D[np.arange(N * T), labels] = 1.0
    return ClusterPartition.from_labels(labels), time, D


def random_instance(seed, n_max=40, K_max=5, density=0.3, dummies=None):
    """Random clusters, controls and within-cluster zero pattern."""
    rng = np.random.default_rng(seed)
    N = int(rng.integers(2, 7))
    sizes = rng.integers(1, 7, N)
    while sizes.sum() > n_max:
        sizes = np.maximum(sizes - 1, 1)
    labels = np.repeat(np.arange(N), sizes)
    n = labels.size
    part = ClusterPartition.from_labels(labels)
    use_dummies = rng.random() < 0.5 if dummies is None else dummies
    if use_dummies:
        W = np.zeros((n, N))
        W[np.arange(n), labels] = 1.0
        if N >= n:
            W = W[:, : n - 1]
        extra = int(rng.integers(0, 3))
        if extra and N + extra < n:
            W = np.column_stack([W, rng.standard_normal((n, extra))])
    else:
        K = int(rng.integers(0, min(K_max, n - 1) + 1))
        W = rng.standard_normal((n, K))
    a, b = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    within = (labels[a] == labels[b]) & (a != b) & (rng.random((n, n)) < density)
    e = ExclusionMatrix.from_pairs(part, np.column_stack([a[within], b[within]]))
    return W, e, rng


def annihilator(W):
    """Textbook ``I - W (W'W)^{-1} W'`` by explicit inversion."""
    W = np.asarray(W, dtype=float).reshape(W.shape[0], -1)
    n = W.shape[0]
    if W.shape[1] == 0:
        return np.eye(n)
    return np.eye(n) - W @ np.linalg.inv(W.T @ W) @ W.T


def row_oracle(W, e, mode="outcome"):
    """``A*`` one row (outcome) or column (design) at a time.

    Each row solves ``min ||a - m||`` subject to ``a'W = 0`` and ``a = 0`` on
    the excluded set, i.e. an orthogonal projection onto a null space
    computed by SVD.
    """
    W = np.asarray(W, dtype=float).reshape(W.shape[0], -1)
    M = annihilator(W)
    n = M.shape[0]
    Z = e.dense() == 0
    A = np.zeros((n, n))
    for r in range(n):
        excl = np.flatnonzero(Z[r] if mode == "outcome" else Z[:, r])
        C = np.vstack([W.T, np.eye(n)[excl]]) if excl.size or W.shape[1] else np.zeros((0, n))
        if C.shape[0]:
            B = null_space(C)
            a = B @ (B.T @ M[r])
        else:
            a = M[r]
        if mode == "outcome":
            A[r] = a
        else:
            A[:, r] = a
    return A


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES = []


def record_criterion(number, title, checks, detail=""):
    """Store and print a PASS/FAIL line; returns whether every check held."""
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}"
    if detail:
        line += f" | {detail}"
    if failed:
        line += f" | failed: {', '.join(failed)}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
