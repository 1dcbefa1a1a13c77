"""Data generating processes and Monte Carlo experiments.

Every DGP separates a fixed design (controls, fixed effects, assignments,
coordinates; drawn from ``design_seed``) from the random shocks (drawn from
``seed``). Monte Carlo runs keep the design and therefore the centering
matrix fixed, and draw replication ``r`` from ``base_seed + r``.
"""

from __future__ import annotations

import json
import math
import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_array
from scipy.stats import kstest

from .centering import _as_csr, build_astar, operator_norm
from .errors import (
    ClusterIVError,
    DegenerateDenominator,
    InvalidGamma,
    InvalidSpec,
    MonteCarloAborted,
)
from .estimator import ClusteredDataset
from .exclusion import ClusterPartition, from_recipe
from .inference import JackknifeOperator, _ar_ratio, _jsonable, invert_ar
from .projections import ControlMatrix, build_projection

KINDS = ("dynamic_panel", "feedback_panel", "two_way_fe", "spatial_interference",
         "custom_linear")
MC_BATCHES = 20
MAX_FAILURE_SHARE = 0.01


# ---------------------------------------------------------------------------
# shocks


@dataclass(frozen=True)
class ShockModel:
    """Within-cluster error covariance and marginal distribution.

    Every ``Sigma_i`` has a unit diagonal: ``iid`` is the identity,
    ``cluster_factor`` adds a common component with share
    ``loading^2 / (1 + loading^2)`` and ``decaying`` has entries
    ``decay^|s - t|``. ``rademacher_mixture`` draws ``s * r`` with ``r = +-1``
    and ``s^2`` equal to 0.5 or 1.5, so it has unit variance and bounded
    fourth moment but is not Gaussian.
    """

    structure: str = "iid"
    loading: float = 1.0
    decay: float = 0.5
    distribution: str = "gaussian"

    def __post_init__(self):
        if self.structure not in ("iid", "cluster_factor", "decaying"):
            raise InvalidSpec(f"unknown shock structure {self.structure!r}")
        if self.distribution not in ("gaussian", "rademacher_mixture"):
            raise InvalidSpec(f"unknown shock distribution {self.distribution!r}")
        if self.structure == "decaying" and not abs(self.decay) < 1:
            raise InvalidSpec("decay must lie in (-1, 1)")

    @classmethod
    def coerce(cls, obj):
        if obj is None:
            return cls()
        if isinstance(obj, ShockModel):
            return obj
        if isinstance(obj, str):
            return cls(structure=obj)
        return cls(**obj)

    def sigma(self, T):
        if self.structure == "iid":
            return np.eye(T)
        if self.structure == "cluster_factor":
            rho = self.loading**2 / (1 + self.loading**2)
            return (1 - rho) * np.eye(T) + rho * np.ones((T, T))
        t = np.arange(T)
        return self.decay ** np.abs(t[:, None] - t[None, :]).astype(float)

    def sigma_norms(self, sizes):
        cache = {}
        out = np.empty(len(sizes))
        for i, T in enumerate(sizes):
            if T not in cache:
                cache[T] = float(np.linalg.eigvalsh(self.sigma(int(T)))[-1])
            out[i] = cache[T]
        return out

    def standard(self, rng, size):
        z = rng.standard_normal(size) if self.distribution == "gaussian" else \
            rng.choice([-1.0, 1.0], size=size)
        if self.distribution == "rademacher_mixture":
            z *= np.sqrt(rng.choice([0.5, 1.5], size=size))
        return z

    def draw(self, rng, sizes):
        """One shock vector, cluster-major, with covariance ``Sigma_i`` per cluster."""
        sizes = np.asarray(sizes, dtype=np.int64)
        out = np.empty(int(sizes.sum()))
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        xi = self.standard(rng, out.size)
        if self.structure == "iid":
            return xi
        for T in np.unique(sizes):
            L = np.linalg.cholesky(self.sigma(int(T)))
            idx = starts[sizes == T][:, None] + np.arange(T)[None, :]
            out[idx] = xi[idx] @ L.T
        return out


# ---------------------------------------------------------------------------
# designs


@dataclass(frozen=True)
class DgpSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    design_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown DGP kind {self.kind!r}; expected one of {KINDS}")

    def with_seed(self, seed):
        return DgpSpec(self.kind, self.params, int(seed), self.design_seed)


@dataclass(frozen=True, eq=False)
class Latent:
    """Simulation-only quantities; never consumed by estimators."""

    e: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    d: np.ndarray
    beta: float


@dataclass(eq=False)
class Design:
    spec: DgpSpec
    partition: ClusterPartition
    W: ControlMatrix
    time: np.ndarray
    coords: object
    shock: ShockModel
    state: dict

    @property
    def n(self):
        return self.partition.n

    def draw(self, seed):
        rng = np.random.default_rng(seed)
        y, x, lat = _DRAW[self.spec.kind](self, rng)
        data = ClusteredDataset(y=y, x=x, W=self.W, partition=self.partition,
                                time=self.time, coords=self.coords)
        return data, lat

    def sigma_norms(self):
        return self.shock.sigma_norms(self.partition.sizes)


def _sizes(p, default_T):
    N = int(p.get("N", 100))
    T = p.get("T", default_T)
    sizes = np.full(N, int(T)) if np.ndim(T) == 0 else np.asarray(T, dtype=np.int64)
    if sizes.size != N or np.any(sizes < 1):
        raise InvalidSpec("T must be a positive integer or a list of N positive integers")
    return N, sizes


def _panel_layout(sizes):
    labels = np.repeat(np.arange(sizes.size), sizes)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    time = np.arange(labels.size) - starts[labels] + 1
    return labels, time


def _cluster_dummies(labels, N):
    D = np.zeros((labels.size, N))
    D[np.arange(labels.size), labels] = 1.0
    return D


def _padded(sizes):
    """Boolean mask of the ``N x max(T)`` grid occupied by observations."""
    return np.arange(sizes.max())[None, :] < sizes[:, None]


def _check(cond, msg):
    if not cond:
        raise InvalidSpec(msg)


def _design_dynamic(spec, rng):
    p = spec.params
    N, sizes = _sizes(p, 3)
    beta = float(p.get("beta", 0.5))
    _check(abs(beta) < 1, "dynamic_panel needs |beta| < 1")
    _check(float(p.get("sigma2", 1.0)) >= 0, "sigma2 must be nonnegative")
    labels, time = _panel_layout(sizes)
    alpha = rng.normal(0.0, float(p.get("alpha_sd", 1.0)), N)
    return labels, time, _cluster_dummies(labels, N), None, {"alpha": alpha, "sizes": sizes}


def _draw_dynamic(design, rng):
    p, st = design.spec.params, design.state
    beta, s2 = float(p.get("beta", 0.5)), float(p.get("sigma2", 1.0))
    sizes, alpha = st["sizes"], st["alpha"]
    sd = math.sqrt(s2)
    mask = _padded(sizes)
    e = sd * design.shock.draw(rng, sizes)
    E = np.zeros(mask.shape)
    E[mask] = e
    level = alpha / (1 - beta)
    Y = np.zeros(mask.shape)
    prev = level + sd / math.sqrt(1 - beta**2) * rng.standard_normal(sizes.size)
    X = np.zeros(mask.shape)
    for t in range(mask.shape[1]):
        X[:, t] = prev
        Y[:, t] = alpha + beta * prev + E[:, t]
        prev = Y[:, t]
    x, y = X[mask], Y[mask]
    lam = np.repeat(level, sizes)
    return y, x, Latent(e=e, v=x - lam, lam=lam, d=np.repeat(alpha, sizes), beta=beta)


def _feedback_x(p, st, mask, E, e0, rng):
    """``x_t = mu + rho x_{t-1} + kappa e_{t-1} + sigma_v eta_t`` and its mean."""
    rho, kappa = float(p.get("rho", 0.5)), float(p.get("kappa", 0.5))
    sv = float(p.get("sigma_v", 1.0))
    mu, x0 = st["mu"], st["x0"]
    X = np.zeros(mask.shape)
    Lam = np.zeros(mask.shape)
    prev, lprev, eprev = x0.copy(), x0.copy(), e0
    for t in range(mask.shape[1]):
        X[:, t] = mu + rho * prev + kappa * eprev + sv * rng.standard_normal(mask.shape[0])
        Lam[:, t] = mu + rho * lprev
        prev, lprev, eprev = X[:, t], Lam[:, t], E[:, t]
    return X, Lam


def _feedback_state(p, N, rng):
    rho = float(p.get("rho", 0.5))
    mu = rng.normal(0.0, float(p.get("mu_sd", 1.0)), N)
    x0 = mu / (1 - rho) if abs(rho) < 1 else np.zeros(N)
    return {"mu": mu, "x0": x0}


def _design_feedback(spec, rng):
    p = spec.params
    N, sizes = _sizes(p, 3)
    labels, time = _panel_layout(sizes)
    st = {"alpha": rng.normal(0.0, float(p.get("alpha_sd", 1.0)), N), "sizes": sizes}
    st.update(_feedback_state(p, N, rng))
    return labels, time, _cluster_dummies(labels, N), None, st


def _draw_feedback(design, rng):
    p, st = design.spec.params, design.state
    beta, sd = float(p.get("beta", 0.5)), math.sqrt(float(p.get("sigma2", 1.0)))
    sizes = st["sizes"]
    mask = _padded(sizes)
    e = sd * design.shock.draw(rng, sizes)
    E = np.zeros(mask.shape)
    E[mask] = e
    e0 = sd * rng.standard_normal(sizes.size)
    X, Lam = _feedback_x(p, st, mask, E, e0, rng)
    x, lam = X[mask], Lam[mask]
    d = np.repeat(st["alpha"], sizes)
    return d + beta * x + e, x, Latent(e=e, v=x - lam, lam=lam, d=d, beta=beta)


def _design_two_way(spec, rng):
    p = spec.params
    N = int(p.get("N", 200))
    T = int(p.get("T", 2))
    G = int(p.get("teachers_per_period", 2))
    _check(N >= 2 * G and T >= 2, "two_way_fe needs T >= 2 and at least two students per teacher")
    sizes = np.full(N, T)
    labels, time = _panel_layout(sizes)
    # year one: split evenly; later years: balanced random reassignment
    teacher = np.zeros((N, T), dtype=np.int64)
    teacher[:, 0] = np.arange(N) % G
    for t in range(1, T):
        teacher[:, t] = t * G + rng.permutation(N) % G
    g = teacher.ravel()
    D = _cluster_dummies(g, T * G)
    W = np.column_stack([_cluster_dummies(labels, N), D[:, :-1]])
    st = {
        "alpha": rng.normal(0.0, float(p.get("alpha_sd", 1.0)), N),
        "gamma": rng.normal(0.0, float(p.get("gamma_sd", 1.0)), T * G),
        "teacher": g,
        "sizes": sizes,
    }
    st.update(_feedback_state(p, N, rng))
    return labels, time, W, None, st


def _draw_two_way(design, rng):
    p, st = design.spec.params, design.state
    beta, sd = float(p.get("beta", 0.5)), math.sqrt(float(p.get("sigma2", 1.0)))
    sizes = st["sizes"]
    mask = _padded(sizes)
    e = sd * design.shock.draw(rng, sizes)
    E = e.reshape(mask.shape)
    e0 = sd * rng.standard_normal(sizes.size)
    X, Lam = _feedback_x(p, st, mask, E, e0, rng)
    x, lam = X.ravel(), Lam.ravel()
    d = np.repeat(st["alpha"], sizes) + st["gamma"][st["teacher"]]
    return d + beta * x + e, x, Latent(e=e, v=x - lam, lam=lam, d=d, beta=beta)


def _design_spatial(spec, rng):
    p = spec.params
    N, sizes = _sizes(p, 20)
    labels, time = _panel_layout(sizes)
    box = float(p.get("box_km", 5.0))
    spacing = float(p.get("cluster_spacing_km", 100.0))
    coords = rng.uniform(0.0, box, (labels.size, 2))
    coords[:, 0] += spacing * labels
    r_int = float(p.get("interference_km", 1.5))
    D = np.hypot(coords[:, None, 0] - coords[None, :, 0], coords[:, None, 1] - coords[None, :, 1])
    F = (D < r_int) & (labels[:, None] == labels[None, :])
    np.fill_diagonal(F, False)
    lo, hi = p.get("p_range", (0.3, 0.7))
    st = {
        "alpha": rng.normal(0.0, float(p.get("alpha_sd", 1.0)), N),
        "p": np.repeat(rng.uniform(float(lo), float(hi), N), sizes),
        "F": F.astype(float),
        "sizes": sizes,
    }
    W = _cluster_dummies(labels, N)
    k = int(p.get("extra_controls", 0))
    if k:
        # village covariates that link the clusters' residualization
        W = np.column_stack([W, rng.standard_normal((labels.size, k))])
    return labels, time, W, coords, st


def _draw_spatial(design, rng):
    p, st = design.spec.params, design.state
    beta, sd = float(p.get("beta", 1.0)), math.sqrt(float(p.get("sigma2", 1.0)))
    gamma = float(p.get("spillover", 1.0))
    x = (rng.random(st["p"].size) < st["p"]).astype(float)
    treated_nbrs = st["F"] @ x
    fn = p.get("interference", "count")
    if fn == "count":
        g = gamma * treated_nbrs
    elif fn == "any":
        g = gamma * (treated_nbrs > 0)
    else:
        raise InvalidSpec(f"unknown interference function {fn!r}")
    e = sd * design.shock.draw(rng, st["sizes"])
    d = np.repeat(st["alpha"], st["sizes"])
    # spillovers are part of the structural error in the design-based model
    return d + beta * x + g + e, x, Latent(e=g + e, v=x - st["p"], lam=st["p"], d=d, beta=beta)


def _design_custom(spec, rng):
    p = spec.params
    N, sizes = _sizes(p, 4)
    labels, time = _panel_layout(sizes)
    K = int(p.get("K_extra", 2))
    n = labels.size
    W = np.column_stack([np.ones(n), rng.standard_normal((n, K))])
    pi = np.asarray(p.get("pi", np.ones(K + 1)), dtype=float)
    delta = np.asarray(p.get("delta", np.ones(K + 1)), dtype=float)
    _check(pi.size == K + 1 and delta.size == K + 1, "pi and delta need K_extra + 1 entries")
    return labels, time, W, None, {"lam": W @ pi, "d": W @ delta, "sizes": sizes}


def _draw_custom(design, rng):
    p, st = design.spec.params, design.state
    beta, sd = float(p.get("beta", 1.0)), math.sqrt(float(p.get("sigma2", 1.0)))
    v = rng.standard_normal(design.n)
    e = sd * design.shock.draw(rng, st["sizes"])
    x = st["lam"] + v
    return beta * x + st["d"] + e, x, Latent(e=e, v=v, lam=st["lam"], d=st["d"], beta=beta)


_DESIGN = {
    "dynamic_panel": _design_dynamic,
    "feedback_panel": _design_feedback,
    "two_way_fe": _design_two_way,
    "spatial_interference": _design_spatial,
    "custom_linear": _design_custom,
}
_DRAW = {
    "dynamic_panel": _draw_dynamic,
    "feedback_panel": _draw_feedback,
    "two_way_fe": _draw_two_way,
    "spatial_interference": _draw_spatial,
    "custom_linear": _draw_custom,
}


def build_design(spec):
    rng = np.random.default_rng(spec.design_seed)
    try:
        shock = ShockModel.coerce(spec.params.get("shock"))
        labels, time, W, coords, state = _DESIGN[spec.kind](spec, rng)
    except (TypeError, KeyError, ValueError) as exc:
        if isinstance(exc, ClusterIVError):
            raise
        raise InvalidSpec(f"invalid parameters for {spec.kind}: {exc}") from exc
    return Design(spec=spec, partition=ClusterPartition.from_labels(labels),
                  W=ControlMatrix.from_array(W), time=time, coords=coords, shock=shock,
                  state=state)


def generate(spec):
    """Draw one dataset; returns ``(ClusteredDataset, Latent)``."""
    return build_design(spec).draw(spec.seed)


# ---------------------------------------------------------------------------
# Monte Carlo


def batch_se(values, batches=MC_BATCHES):
    """Monte Carlo standard error of a mean by batch means."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size < 2:
        return math.nan
    if v.size < 2 * batches:
        return float(v.std(ddof=1) / math.sqrt(v.size))
    m = v.size // batches
    means = v[: m * batches].reshape(batches, m).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(batches))


@dataclass
class MCReport:
    replications: int
    mean_bias_ols: float
    mean_bias_astar: float
    mc_se: float
    mc_se_ols: float
    ar_rejection_rate: float
    ci_coverage: float
    contains_estimate_rate: float
    set_kind_counts: dict
    jk_surplus: float
    jk_surplus_se: float
    var_z: float
    mean_vjk: float
    ks_statistic: float
    failures: int
    trace_A: float
    runtime: float = 0.0
    draws: dict = field(default=None, repr=False)

    def to_dict(self, include_runtime=False):
        d = {k: v for k, v in self.__dict__.items() if k not in ("draws", "runtime")}
        if include_runtime:
            d["runtime"] = self.runtime
        return _jsonable(d)

    def to_json(self, include_runtime=False, **kw):
        return json.dumps(self.to_dict(include_runtime), sort_keys=True, **kw)

    def draws_csv(self, path):
        keys = list(self.draws)
        cols = np.column_stack([np.asarray(self.draws[k], dtype=float) for k in keys])
        np.savetxt(path, cols, delimiter=",", header=",".join(keys), comments="", fmt="%.17g")


@dataclass(eq=False)
class Pipeline:
    """Fixed design plus everything derived from it."""

    design: Design
    A: object
    M: object
    op: JackknifeOperator
    exclusion: object

    @classmethod
    def build(cls, spec, recipe, mode="outcome", method="leaveout"):
        design = build_design(spec)
        e = from_recipe(recipe, design.partition, design.time, design.coords)
        M = build_projection(design.W)
        A = build_astar(M, e, mode=mode, method=method)
        return cls(design=design, A=A.A, M=M, op=JackknifeOperator(A.A, design.partition),
                   exclusion=e)


def _replicate(pipe, seed, alpha):
    data, lat = pipe.design.draw(seed)
    x, y, beta = data.x, data.y, lat.beta
    A = pipe.op.A
    out = {}
    xMx = float(x @ pipe.M.apply(x))
    out["bias_ols"] = float(x @ pipe.M.apply(y)) / xMx - beta if xMx != 0 else math.nan
    b = float(x @ (A @ x))
    if abs(b) <= 1e-10 * x.size * float(np.var(x)) or b == 0.0:
        raise DegenerateDenominator("x'Ax degenerate in replication")
    bhat = float(x @ (A @ y)) / b
    out["bias_astar"] = bhat - beta
    U = y - x * beta
    z = float(x @ (A @ U))
    vjk = float(np.sum(pipe.op.deltas(x, U) ** 2))
    crit = _CRIT.get(alpha)
    if crit is None:
        from scipy.stats import chi2

        crit = _CRIT.setdefault(alpha, float(chi2.ppf(1 - alpha, 1)))
    out["z"] = z
    out["z_true"] = float(x @ (A @ lat.e))
    out["vjk"] = vjk
    out["ar_reject"] = float(_ar_ratio(z, vjk) > crit)
    cs = invert_ar(data, A, alpha, op=pipe.op)
    out["covers"] = float(cs.contains(beta))
    out["contains_hat"] = float(cs.contains(bhat))
    out["kind"] = cs.kind
    return out


_CRIT = {}


def _run_reps(fn, R, base_seed, workers):
    seeds = [base_seed + r for r in range(R)]
    results = [None] * R

    def one(r):
        try:
            return fn(seeds[r])
        except ClusterIVError as exc:
            return exc

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(R)))
    else:
        results = [one(r) for r in range(R)]
    ok = [r for r in results if not isinstance(r, Exception)]
    failures = R - len(ok)
    if failures > MAX_FAILURE_SHARE * R:
        raise MonteCarloAborted(f"{failures} of {R} replications failed: {results[0]!r}"
                                if isinstance(results[0], Exception)
                                else f"{failures} of {R} replications failed")
    return ok, failures


def run_monte_carlo(spec, recipe, R=1000, base_seed=0, mode="outcome", method="leaveout",
                    alpha=0.05, workers=None, keep_draws=False, pipeline=None):
    """Replicate generate -> exclusion -> A* -> estimate -> infer ``R`` times."""
    if R < 100:
        raise InvalidSpec("run_monte_carlo needs at least 100 replications")
    t0 = _time.perf_counter()
    pipe = pipeline or Pipeline.build(spec, recipe, mode=mode, method=method)
    ok, failures = _run_reps(lambda s: _replicate(pipe, s, alpha), R, base_seed, workers)
    col = {k: np.array([o[k] for o in ok]) for k in ok[0] if k != "kind"}
    kinds = {k: 0 for k in ("bounded_interval", "complement_of_interval", "whole_line")}
    for o in ok:
        kinds[o["kind"]] += 1
    z = col["z_true"]
    var_z = float(np.mean((z - z.mean()) ** 2))
    sd = math.sqrt(var_z) if var_z > 0 else 1.0
    surplus = col["vjk"] - (col["z"] - col["z"].mean()) ** 2
    report = MCReport(
        replications=len(ok),
        mean_bias_ols=float(np.nanmean(col["bias_ols"])),
        mean_bias_astar=float(col["bias_astar"].mean()),
        mc_se=batch_se(col["bias_astar"]),
        mc_se_ols=batch_se(col["bias_ols"]),
        ar_rejection_rate=float(col["ar_reject"].mean()),
        ci_coverage=float(col["covers"].mean()),
        contains_estimate_rate=float(col["contains_hat"].mean()),
        set_kind_counts=kinds,
        jk_surplus=float(surplus.mean()),
        jk_surplus_se=batch_se(surplus),
        var_z=var_z,
        mean_vjk=float(col["vjk"].mean()),
        ks_statistic=float(kstest((z - z.mean()) / sd, "norm").statistic),
        failures=failures,
        trace_A=float(pipe.op.A.diagonal().sum()),
    )
    report.runtime = _time.perf_counter() - t0
    if keep_draws:
        report.draws = col
    return report


# ---------------------------------------------------------------------------
# quadratic forms and the Hoeffding decomposition


def conforming_gamma(T=2):
    """Random symmetric ``Gamma`` with zero diagonal blocks and small entries,
    so that no single block pair dominates."""

    def build(N, rng):
        sizes = np.full(N, T)
        n = N * T
        G = rng.standard_normal((n, n)) / math.sqrt(n)
        G = 0.5 * (G + G.T)
        lab = np.repeat(np.arange(N), T)
        G[lab[:, None] == lab[None, :]] = 0.0
        return G, sizes

    return build


def concentrated_gamma(T=2):
    """All mass on a single pair of blocks (negligibility fails)."""

    def build(N, rng):
        n = N * T
        G = np.zeros((n, n))
        B = rng.standard_normal((T, T))
        G[:T, T:2 * T] = B
        G[T:2 * T, :T] = B.T
        return G, np.full(N, T)

    return build


def _check_gamma(G, sizes):
    lab = np.repeat(np.arange(sizes.size), sizes)
    if G.shape != (lab.size, lab.size):
        raise InvalidGamma("Gamma must be n x n")
    if np.any(G[lab[:, None] == lab[None, :]] != 0):
        raise InvalidGamma("diagonal blocks of Gamma must be zero")
    if not np.allclose(G, G.T, atol=1e-12 * max(1.0, np.abs(G).max())):
        raise InvalidGamma("Gamma must satisfy Gamma_ij = Gamma_ji'")


@dataclass
class QuadraticCLTResult:
    ks_statistic: float
    ks_pvalue: float
    empirical_variance: float
    theoretical_variance: float
    variance_ratio: float
    replications: int


def quadratic_clt_experiment(gamma_builder, shock=None, N=200, replications=5000, seed=0,
                             chunk=1000):
    """Simulate ``S = xi' Gamma xi`` with independent clusters ``xi_i``.

    The theoretical variance is ``2 ||Sigma^(1/2) Gamma Sigma^(1/2)||_F^2``,
    which is ``2 ||Gamma||_F^2`` for unit-variance iid shocks.
    """
    shock = ShockModel.coerce(shock)
    rng = np.random.default_rng(seed)
    G, sizes = gamma_builder(N, rng)
    G = np.asarray(G, dtype=float)
    sizes = np.asarray(sizes)
    _check_gamma(G, sizes)
    if shock.structure == "iid":
        V = 2 * float(np.sum(G**2))
    else:
        lab = np.repeat(np.arange(sizes.size), sizes)
        H = np.zeros_like(G)
        for T in np.unique(sizes):
            L = np.linalg.cholesky(shock.sigma(int(T)))
            for i in np.flatnonzero(sizes == T):
                idx = np.flatnonzero(lab == i)
                H[idx, :] = L.T @ G[idx, :]
        for T in np.unique(sizes):
            L = np.linalg.cholesky(shock.sigma(int(T)))
            for i in np.flatnonzero(sizes == T):
                idx = np.flatnonzero(lab == i)
                H[:, idx] = H[:, idx] @ L
        V = 2 * float(np.sum(H**2))
    S = np.empty(replications)
    for lo in range(0, replications, chunk):
        hi = min(lo + chunk, replications)
        X = np.stack([shock.draw(rng, sizes) for _ in range(hi - lo)])
        S[lo:hi] = np.einsum("ri,ri->r", X @ G, X)
    if V == 0:
        return QuadraticCLTResult(0.0, 1.0, float(S.var()), 0.0, math.nan, replications)
    ks = kstest(S / math.sqrt(V), "norm")
    emp = float(S.var(ddof=1))
    return QuadraticCLTResult(float(ks.statistic), float(ks.pvalue), emp, V, emp / V,
                              replications)


def _block_sums(A, lab, N, left, right):
    """``N x N`` matrix with entries ``left_i' A_ij right_j``."""
    coo = A.tocoo()
    w = left[coo.row] * coo.data * right[coo.col]
    return coo_array((w, (lab[coo.row], lab[coo.col])), shape=(N, N)).toarray()


@dataclass
class _Stat:
    mean: float
    se: float

    def to_dict(self):
        return {"mean": self.mean, "se": self.se}


def _stat(v):
    v = np.asarray(v, dtype=float)
    return _Stat(float(v.mean()), batch_se(v))


@dataclass
class GaussianityResult:
    replications: int
    ks_statistic: float
    total_variance: float
    linear_variance: float
    quadratic_variance: float
    cross_covariance: _Stat
    correction: _Stat
    quadratic_diagonal: _Stat
    decomposition_gap: _Stat

    def to_dict(self):
        d = dict(self.__dict__)
        for k, v in d.items():
            if isinstance(v, _Stat):
                d[k] = v.to_dict()
        return d


def _hoeffding_pieces(A, lab, N, lat, own):
    x_e = lat.lam + lat.v
    total = float(x_e @ (A @ lat.e))
    P = _block_sums(A, lab, N, lat.v, lat.e)
    own_ve = float(np.trace(P))
    linear = float(lat.lam @ (A @ lat.e)) + own_ve
    quad = total - linear
    diagP = np.diag(P)
    corr = float(np.sum(P * P.T) - np.sum(diagP**2))
    qdiag = float(np.sum((P.sum(axis=0) - diagP) ** 2))
    return total, linear, quad, corr, qdiag, P


def gaussianity_experiment(spec, recipe, replications=2000, base_seed=0, mode="outcome",
                           method="leaveout", pipeline=None):
    """Hoeffding decomposition of ``x'Ae`` using the latent shocks.

    ``x'Ae = L + Q`` with ``L = sum_j omega_j e_j`` (first-order part) and
    ``Q = sum_j Q_j e_j`` (degenerate second-order part). ``correction`` is the
    Monte Carlo mean of ``sum_{i != j} (v_i'A_ij e_j)(v_j'A_ji e_i)``, the
    cross-cluster covariance term that cluster-robust formulas omit.
    """
    pipe = pipeline or Pipeline.build(spec, recipe, mode=mode, method=method)
    A = pipe.op.A
    part = pipe.design.partition
    lab, N = part.assignment, part.N

    def one(seed):
        _, lat = pipe.design.draw(seed)
        return _hoeffding_pieces(A, lab, N, lat, None)[:5]

    ok, _ = _run_reps(one, replications, base_seed, None)
    arr = np.array(ok)
    total, lin, quad, corr, qdiag = arr.T
    lc, qc = lin - lin.mean(), quad - quad.mean()
    sd = total.std()
    gap = (total - total.mean()) ** 2 - lc**2 - qc**2
    return GaussianityResult(
        replications=len(ok),
        ks_statistic=float(kstest((total - total.mean()) / sd, "norm").statistic)
        if sd > 0 else 0.0,
        total_variance=float(total.var()),
        linear_variance=float(lin.var()),
        quadratic_variance=float(quad.var()),
        cross_covariance=_stat(lc * qc),
        correction=_stat(corr),
        quadratic_diagonal=_stat(qdiag),
        decomposition_gap=_stat(gap),
    )


@dataclass
class JackknifeSurplusResult:
    replications: int
    mean_vjk: float
    var_z: float
    surplus: _Stat
    mu_sq: float
    pair_term: _Stat
    shift_term: _Stat
    identity_gap: _Stat
    block_diagonal: bool

    def to_dict(self):
        d = dict(self.__dict__)
        for k, v in d.items():
            if isinstance(v, _Stat):
                d[k] = v.to_dict()
        return d


def jackknife_surplus_experiment(spec, recipe, replications=2000, base_seed=0,
                                 mode="outcome", method="leaveout", pipeline=None):
    """Check ``E[V_JK] - V(Z)`` against its three nonnegative components.

    With ``P_ij = v_i'A_ij e_j``, ``H_ij = lambda_j'A_ji e_i + v_i'A_ij d_j`` and
    ``mu_j = sum_{i != j} lambda_i'A_ij d_j`` the surplus equals
    ``sum mu_j^2 + sum_{i<j} V(P_ij + P_ji) + sum_{i != j} V(H_ij)``, all at the
    true coefficient. ``identity_gap`` is the per-replication difference, whose
    mean should vanish.
    """
    pipe = pipeline or Pipeline.build(spec, recipe, mode=mode, method=method)
    A, op = pipe.op.A, pipe.op
    part = pipe.design.partition
    lab, N = part.assignment, part.N
    off = ~np.eye(N, dtype=bool)
    _, lat0 = pipe.design.draw(base_seed)
    H0 = _block_sums(A, lab, N, lat0.lam, lat0.d)
    mu = (H0 * off).sum(axis=0)
    mu_sq = float(np.sum(mu**2))

    def one(seed):
        data, lat = pipe.design.draw(seed)
        U = data.y - data.x * lat.beta
        z = float(data.x @ (A @ U))
        vjk = float(np.sum(op.deltas(data.x, U) ** 2))
        P = _block_sums(A, lab, N, lat.v, lat.e)
        S = P + P.T
        pair = 0.5 * float(np.sum((S * off) ** 2))
        H = _block_sums(A, lab, N, lat.lam, lat.e).T + _block_sums(A, lab, N, lat.v, lat.d)
        shift = float(np.sum((H * off) ** 2))
        return z, vjk, pair, shift

    ok, _ = _run_reps(one, replications, base_seed, None)
    z, vjk, pair, shift = np.array(ok).T
    # E[Z] = 0 under correct centering, so Z^2 is unbiased for V(Z)
    surplus = vjk - z**2
    return JackknifeSurplusResult(
        replications=len(ok),
        mean_vjk=float(vjk.mean()),
        var_z=float(np.mean(z**2)),
        surplus=_stat(surplus),
        mu_sq=mu_sq,
        pair_term=_stat(pair),
        shift_term=_stat(shift),
        identity_gap=_stat(surplus - pair - shift - mu_sq),
        block_diagonal=op.block_diagonal,
    )


def lemma6_diagnostics(data, A, sigma_norms, M=None):
    """Sufficient-condition ratios for asymptotic Gaussianity.

    ``sigma_norms`` holds ``||Sigma_i||`` per cluster (from a shock model or
    user-supplied bounds). The ``primitive_*`` entries depend only on cluster
    sizes, shock norms and ``||M||_inf``; the ``A_*`` entries evaluate the
    corresponding high-level conditions on ``A`` directly.
    """
    part = data.partition
    n = part.n
    s = np.asarray(sigma_norms, dtype=float)
    smax = float(s.max())
    T = part.sizes.astype(float)
    M = build_projection(data.W) if M is None else M
    As = _as_csr(A).tocoo()
    lab = part.assignment
    sq = coo_array((As.data**2, (lab[As.row], lab[As.col])), shape=(part.N, part.N)).toarray()
    diag_sq = np.diag(sq)
    cross = lab[As.row] != lab[As.col]
    off_total = float(np.sum(As.data[cross] ** 2))
    row_col = sq.sum(axis=1) + sq.sum(axis=0)
    return {
        "primitive_sigma2_T_over_n": float(np.max(s**2 * T)) / n,
        "primitive_T3_sigma_Minf2_over_n": float(T.max() ** 3 * smax * M.inf_norm() ** 2) / n,
        "primitive_sigma2_T2_over_n": smax**2 * float(T.max() ** 2) / n,
        "max_Ti4_over_n": float(T.max() ** 4) / n,
        "A_diag_block_ratio": smax**2 * float(diag_sq.max()) / n,
        "A_offdiag_total_ratio": smax**2 * off_total / n,
        "A_offdiag_max_ratio": smax**2 * float(row_col.max()) / n,
        "A_operator_ratio": smax**2 * operator_norm(A) ** 2 / n,
    }


# ---------------------------------------------------------------------------
# config files


RUN_KEYS = {"replications", "base_seed", "recipe", "horizon", "radius", "great_circle",
            "mode", "method", "alpha", "workers"}
SHOCK_KEYS = {"shock": "structure", "shock_loading": "loading", "shock_decay": "decay",
              "shock_distribution": "distribution"}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config(text):
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Values are read as JSON when possible (numbers, lists, ``true``) and as
    bare strings otherwise. ``kind``, ``seed`` and ``design_seed`` build the
    :class:`DgpSpec`; ``shock*`` keys build its :class:`ShockModel`; the keys
    in :data:`RUN_KEYS` configure the run; everything else is a DGP parameter.
    """
    spec_kw, params, shock, run = {}, {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidSpec(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        value = _parse_value(value)
        if key in ("kind", "seed", "design_seed"):
            spec_kw[key] = value
        elif key in SHOCK_KEYS:
            shock[SHOCK_KEYS[key]] = value
        elif key in RUN_KEYS:
            run[key] = value
        else:
            params[key] = value
    if "kind" not in spec_kw:
        raise InvalidSpec("config needs a 'kind' line")
    if shock:
        params["shock"] = shock
    spec = DgpSpec(kind=spec_kw["kind"], params=params, seed=int(spec_kw.get("seed", 0)),
                   design_seed=int(spec_kw.get("design_seed", 0)))
    recipe = {"kind": run.pop("recipe", "strict")}
    for k in ("horizon", "radius", "great_circle"):
        if k in run:
            recipe[k] = run.pop(k)
    run["recipe"] = recipe
    return spec, run


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())
