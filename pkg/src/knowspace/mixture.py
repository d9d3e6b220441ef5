"""Variational posterior for a stick-breaking Gaussian mixture with diagonal covariance.

Each component is a product of d independent Normal-Gamma conjugate pairs
(mean + per-dimension precision), and mixture weights follow a truncation-free
stick-breaking construction over the currently active components.  All
operations here are pure functions; state objects are treated as immutable
(updates return new instances).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, digamma, gammaln

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class NIGHyper:
    """Prior over component parameters plus the stick concentration.

    m0      : prior mean, shape (d,)
    kappa0  : strength of the mean prior (scalar > 0)
    a0      : Gamma shape shared across dimensions (> 0.5)
    b0      : per-dimension Gamma rate, shape (d,)
    alpha   : stick-breaking concentration (> 0)
    """

    m0: np.ndarray
    kappa0: float
    a0: float
    b0: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "m0", np.asarray(self.m0, dtype=float))
        object.__setattr__(self, "b0", np.asarray(self.b0, dtype=float))
        if self.m0.ndim != 1:
            raise ValueError("m0 must be a vector")
        if self.b0.shape != self.m0.shape:
            raise ValueError("b0 must match m0 in length")
        if not (self.kappa0 > 0):
            raise ValueError("kappa0 must be positive")
        if not (self.a0 > 0.5):
            raise ValueError("a0 must exceed 0.5")
        if not np.all(self.b0 > 0):
            raise ValueError("all b0 entries must be positive")
        if not (self.alpha > 0):
            raise ValueError("alpha must be positive")

    @property
    def dim(self) -> int:
        return self.m0.shape[0]

    @classmethod
    def from_data(cls, batch: np.ndarray, kappa0: float = 1.0, a0: float = 1.0,
                  alpha: float = 1.0, var_floor: float = 1e-6) -> "NIGHyper":
        """Data-scaled defaults: m0 = batch mean, b0 = per-dim variance (floored)."""
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        m0 = batch.mean(axis=0)
        var = np.maximum(batch.var(axis=0), var_floor)
        return cls(m0=m0, kappa0=kappa0, a0=a0, b0=var, alpha=alpha)


@dataclass(frozen=True)
class ComponentPosterior:
    """Normal-Gamma posterior of one component (read-only view)."""

    m: np.ndarray
    kappa: float
    a: float
    b: np.ndarray
    soft_count: float
    created_task: int


@dataclass(frozen=True)
class StickPosterior:
    """Beta posterior of one stick fraction."""

    eta1: float
    eta0: float


@dataclass
class SuffStats:
    """Responsibility-weighted zeroth/first/second moments per component.

    count : (K,)   sum of responsibilities
    sum   : (K, d) weighted sum of observations
    sumsq : (K, d) weighted sum of elementwise squares
    """

    count: np.ndarray
    sum: np.ndarray
    sumsq: np.ndarray

    def __post_init__(self):
        self.count = np.asarray(self.count, dtype=float)
        self.sum = np.asarray(self.sum, dtype=float)
        self.sumsq = np.asarray(self.sumsq, dtype=float)
        if self.sum.shape != self.sumsq.shape or self.count.shape[0] != self.sum.shape[0]:
            raise ValueError("inconsistent sufficient-statistic shapes")

    @property
    def n_components(self) -> int:
        return self.count.shape[0]

    @property
    def dim(self) -> int:
        return self.sum.shape[1]

    @classmethod
    def zeros(cls, n_components: int, dim: int) -> "SuffStats":
        return cls(np.zeros(n_components), np.zeros((n_components, dim)),
                   np.zeros((n_components, dim)))

    def copy(self) -> "SuffStats":
        return SuffStats(self.count.copy(), self.sum.copy(), self.sumsq.copy())

    def __add__(self, other: "SuffStats") -> "SuffStats":
        return SuffStats(self.count + other.count, self.sum + other.sum,
                         self.sumsq + other.sumsq)

    def __sub__(self, other: "SuffStats") -> "SuffStats":
        return SuffStats(self.count - other.count, self.sum - other.sum,
                         self.sumsq - other.sumsq)

    def padded(self, n_components: int) -> "SuffStats":
        """Zero-extend to a larger component count."""
        extra = n_components - self.n_components
        if extra < 0:
            raise ValueError("cannot shrink sufficient statistics by padding")
        if extra == 0:
            return self.copy()
        d = self.dim
        return SuffStats(
            np.concatenate([self.count, np.zeros(extra)]),
            np.vstack([self.sum, np.zeros((extra, d))]),
            np.vstack([self.sumsq, np.zeros((extra, d))]),
        )

    def merged(self, keep: int, absorb: int) -> "SuffStats":
        """Sum column `absorb` into column `keep` and drop it."""
        out = self.copy()
        out.count[keep] += out.count[absorb]
        out.sum[keep] += out.sum[absorb]
        out.sumsq[keep] += out.sumsq[absorb]
        sel = np.arange(out.n_components) != absorb
        return SuffStats(out.count[sel], out.sum[sel], out.sumsq[sel])


def sum_stats(stats_list, n_components: int, dim: int) -> SuffStats:
    """Kahan-compensated sum of SuffStats, each zero-padded to `n_components`."""
    total = SuffStats.zeros(n_components, dim)
    comp = SuffStats.zeros(n_components, dim)
    for s in stats_list:
        s = s.padded(n_components)
        for fld in ("count", "sum", "sumsq"):
            t = getattr(total, fld)
            c = getattr(comp, fld)
            y = getattr(s, fld) - c
            new = t + y
            c[...] = (new - t) - y
            t[...] = new
    return total


@dataclass
class MixtureState:
    """Full variational posterior: stacked component and stick parameters.

    Arrays are stacked over the K active components; K = 0 is a legal empty
    state awaiting its first seeded component.
    """

    hyper: NIGHyper
    m: np.ndarray = None          # (K, d)
    kappa: np.ndarray = None      # (K,)
    a: np.ndarray = None          # (K,)
    b: np.ndarray = None          # (K, d)
    soft_count: np.ndarray = None  # (K,)
    created_task: np.ndarray = None  # (K,) int
    eta1: np.ndarray = None       # (K,)
    eta0: np.ndarray = None       # (K,)

    def __post_init__(self):
        d = self.hyper.dim
        if self.m is None:
            self.m = np.zeros((0, d))
            self.kappa = np.zeros(0)
            self.a = np.zeros(0)
            self.b = np.zeros((0, d))
            self.soft_count = np.zeros(0)
            self.created_task = np.zeros(0, dtype=int)
            self.eta1 = np.zeros(0)
            self.eta0 = np.zeros(0)
        self.m = np.asarray(self.m, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.created_task = np.asarray(self.created_task, dtype=int)

    @property
    def n_components(self) -> int:
        return self.m.shape[0]

    @property
    def dim(self) -> int:
        return self.hyper.dim

    @property
    def components(self) -> list[ComponentPosterior]:
        return [ComponentPosterior(self.m[k].copy(), float(self.kappa[k]),
                                   float(self.a[k]), self.b[k].copy(),
                                   float(self.soft_count[k]), int(self.created_task[k]))
                for k in range(self.n_components)]

    @property
    def sticks(self) -> list[StickPosterior]:
        return [StickPosterior(float(self.eta1[k]), float(self.eta0[k]))
                for k in range(self.n_components)]

    def copy(self) -> "MixtureState":
        return MixtureState(self.hyper, self.m.copy(), self.kappa.copy(),
                            self.a.copy(), self.b.copy(), self.soft_count.copy(),
                            self.created_task.copy(), self.eta1.copy(), self.eta0.copy())

    def select(self, indices) -> "MixtureState":
        """Keep only the given components, in the given order."""
        idx = np.asarray(indices, dtype=int)
        return MixtureState(self.hyper, self.m[idx], self.kappa[idx], self.a[idx],
                            self.b[idx], self.soft_count[idx], self.created_task[idx],
                            self.eta1[idx], self.eta0[idx])

    def expected_weights(self) -> np.ndarray:
        """E[pi_k] under the Beta stick posteriors."""
        if self.n_components == 0:
            return np.zeros(0)
        e_beta = self.eta1 / (self.eta1 + self.eta0)
        remain = np.concatenate([[1.0], np.cumprod(1.0 - e_beta[:-1])])
        return e_beta * remain


def seed_state(hyper: NIGHyper, batch: np.ndarray, task_id: int = 0) -> MixtureState:
    """One-component state whose posterior absorbs the whole batch."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    stats = SuffStats(np.array([float(batch.shape[0])]),
                      batch.sum(axis=0)[None, :],
                      (batch ** 2).sum(axis=0)[None, :])
    state = MixtureState(hyper,
                         m=np.zeros((1, hyper.dim)), kappa=np.ones(1),
                         a=np.ones(1), b=np.ones((1, hyper.dim)),
                         soft_count=np.zeros(1),
                         created_task=np.array([task_id]),
                         eta1=np.ones(1), eta0=np.full(1, hyper.alpha))
    return global_step(state, stats)


def append_component(state: MixtureState, stats_column: SuffStats,
                     task_id: int) -> MixtureState:
    """Append one component built by a conjugate update of the prior.

    `stats_column` must hold exactly one component's statistics.
    """
    if stats_column.n_components != 1:
        raise ValueError("expected statistics for exactly one component")
    h = state.hyper
    n = float(stats_column.count[0])
    s = stats_column.sum[0]
    ss = stats_column.sumsq[0]
    kappa = h.kappa0 + n
    m = (h.kappa0 * h.m0 + s) / kappa
    a = h.a0 + n / 2.0
    if n > 0:
        mean = s / n
        b = h.b0 + 0.5 * (ss - s ** 2 / n) + h.kappa0 * n * (mean - h.m0) ** 2 / (2.0 * kappa)
    else:
        b = h.b0.copy()
    return MixtureState(
        state.hyper,
        m=np.vstack([state.m, m[None, :]]),
        kappa=np.concatenate([state.kappa, [kappa]]),
        a=np.concatenate([state.a, [a]]),
        b=np.vstack([state.b, np.maximum(b, 1e-12)[None, :]]),
        soft_count=np.concatenate([state.soft_count, [n]]),
        created_task=np.concatenate([state.created_task, [task_id]]),
        eta1=np.concatenate([state.eta1, [1.0 + n]]),
        eta0=np.concatenate([state.eta0, [h.alpha]]),
    )


# ---------------------------------------------------------------------------
# Expectations
# ---------------------------------------------------------------------------

def expected_log_stick_weights(state: MixtureState) -> np.ndarray:
    """E[log pi_k] for each active component via digamma identities."""
    if state.n_components == 0:
        raise ValueError("no components")
    total = digamma(state.eta1 + state.eta0)
    e_log_beta = digamma(state.eta1) - total
    e_log_1m = digamma(state.eta0) - total
    return e_log_beta + np.concatenate([[0.0], np.cumsum(e_log_1m[:-1])])


def expected_log_likelihood_matrix(state: MixtureState, batch: np.ndarray) -> np.ndarray:
    """E_q[log N(x_i | mu_k, diag precision)] for all rows and components, (n, K)."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[1] != state.dim:
        raise ValueError(f"dimension mismatch: batch has {batch.shape[1]}, state has {state.dim}")
    # per dim: -log(2pi)/2 + (psi(a) - log b)/2 - (a/b)(x - m)^2/2 - 1/(2 kappa)
    e_log_prec = digamma(state.a)[:, None] - np.log(state.b)      # (K, d)
    e_prec = state.a[:, None] / state.b                            # (K, d)
    const = 0.5 * (e_log_prec - LOG_2PI).sum(axis=1) - 0.5 * state.dim / state.kappa  # (K,)
    # quadratic term expanded so it vectorizes over the batch
    quad = (batch ** 2) @ e_prec.T - 2.0 * batch @ (e_prec * state.m).T \
        + (e_prec * state.m ** 2).sum(axis=1)[None, :]             # (n, K)
    return const[None, :] - 0.5 * quad


def expected_log_likelihood(state: MixtureState, x: np.ndarray) -> np.ndarray:
    """Single-observation version; returns a length-K vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("observation must be a vector")
    return expected_log_likelihood_matrix(state, x[None, :])[0]


# ---------------------------------------------------------------------------
# Coordinate ascent steps
# ---------------------------------------------------------------------------

def local_step(state: MixtureState, batch: np.ndarray) -> np.ndarray:
    """Responsibilities r_ik ∝ exp(E[log pi_k] + E[log p(x_i | theta_k)])."""
    if state.n_components == 0:
        raise ValueError("no components: seed a component before running a local step")
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    log_r = expected_log_likelihood_matrix(state, batch) + expected_log_stick_weights(state)[None, :]
    log_r -= log_r.max(axis=1, keepdims=True)
    r = np.exp(log_r)
    r /= r.sum(axis=1, keepdims=True)
    return r


def accumulate_stats(batch: np.ndarray, resp: np.ndarray) -> SuffStats:
    """Mini-batch sufficient statistics under soft assignments."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    resp = np.asarray(resp, dtype=float)
    if resp.ndim != 2 or resp.shape[0] != batch.shape[0]:
        raise ValueError("responsibility rows must match the batch size")
    return SuffStats(resp.sum(axis=0), resp.T @ batch, resp.T @ (batch ** 2))


def global_step(state: MixtureState, stats: SuffStats) -> MixtureState:
    """Conjugate Normal-Gamma and stick-Beta updates from aggregated statistics."""
    if stats.n_components != state.n_components:
        raise ValueError("statistics component count does not match the state")
    if np.any(stats.count < -1e-9):
        raise ValueError("negative counts in sufficient statistics")
    h = state.hyper
    n = np.maximum(stats.count, 0.0)
    kappa = h.kappa0 + n
    m = (h.kappa0 * h.m0[None, :] + stats.sum) / kappa[:, None]
    a = h.a0 + n / 2.0
    b = np.tile(h.b0, (state.n_components, 1))
    pos = n > 0
    if np.any(pos):
        npos = n[pos][:, None]
        mean = stats.sum[pos] / npos
        scatter = stats.sumsq[pos] - stats.sum[pos] ** 2 / npos
        shift = h.kappa0 * npos * (mean - h.m0[None, :]) ** 2 / (2.0 * kappa[pos][:, None])
        b = b.copy()
        b[pos] = h.b0[None, :] + 0.5 * np.maximum(scatter, 0.0) + shift
    eta1 = 1.0 + n
    tail = np.concatenate([np.cumsum(n[::-1])[::-1][1:], [0.0]])
    eta0 = h.alpha + tail
    return MixtureState(h, m=m, kappa=kappa, a=a, b=np.maximum(b, 1e-12),
                        soft_count=n, created_task=state.created_task.copy(),
                        eta1=eta1, eta0=eta0)


def predictive_assign(state: MixtureState, x: np.ndarray) -> tuple[int, float]:
    """Hard assignment of one observation: (component index, log responsibility)."""
    r = local_step(state, np.asarray(x, dtype=float)[None, :])[0]
    k = int(np.argmax(r))  # argmax takes the lowest index on ties
    return k, float(np.log(max(r[k], 1e-300)))


# ---------------------------------------------------------------------------
# Evidence lower bound
# ---------------------------------------------------------------------------

def _kl_beta(eta1, eta0, a0, b0):
    """KL(Beta(eta1, eta0) || Beta(a0, b0)), vectorized."""
    return (betaln(a0, b0) - betaln(eta1, eta0)
            + (eta1 - a0) * digamma(eta1) + (eta0 - b0) * digamma(eta0)
            + (a0 - eta1 + b0 - eta0) * digamma(eta1 + eta0))


def _kl_normal_gamma(state: MixtureState) -> np.ndarray:
    """KL(q(mu_k, lambda_k) || prior), summed over dimensions, per component."""
    h = state.hyper
    a, b = state.a[:, None], state.b
    a0, b0 = h.a0, h.b0[None, :]
    kl_gamma = ((a - a0) * digamma(a) - gammaln(a) + gammaln(a0)
                + a0 * (np.log(b) - np.log(b0)) + a * (b0 - b) / b)
    e_prec = a / b
    kl_normal = 0.5 * (np.log(state.kappa[:, None] / h.kappa0) + h.kappa0 / state.kappa[:, None]
                       - 1.0 + h.kappa0 * e_prec * (state.m - h.m0[None, :]) ** 2)
    return (kl_gamma + kl_normal).sum(axis=1)


def resp_entropy(resp: np.ndarray) -> float:
    """Shannon entropy of the assignment posterior, 0 log 0 = 0."""
    r = np.asarray(resp, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(r > 0, r * np.log(r), 0.0)
    return float(-term.sum())


def surrogate_elbo(state: MixtureState, stats: SuffStats) -> float:
    """ELBO minus the assignment entropy, computable from aggregated statistics.

    Exact for the Gaussian-family, stick, and KL terms; used by merge
    acceptance where per-point responsibilities are no longer available.
    """
    if stats.n_components != state.n_components:
        raise ValueError("statistics component count does not match the state")
    if state.n_components == 0:
        raise ValueError("no components")
    e_log_prec = digamma(state.a)[:, None] - np.log(state.b)   # (K, d)
    e_prec = state.a[:, None] / state.b
    quad = stats.sumsq - 2.0 * state.m * stats.sum + stats.count[:, None] * state.m ** 2
    data = (0.5 * stats.count[:, None] * (e_log_prec - LOG_2PI - 1.0 / state.kappa[:, None])
            - 0.5 * e_prec * quad).sum()
    assign = float(stats.count @ expected_log_stick_weights(state))
    kl_sticks = _kl_beta(state.eta1, state.eta0, 1.0, state.hyper.alpha).sum()
    kl_comps = _kl_normal_gamma(state).sum()
    return float(data + assign - kl_sticks - kl_comps)


def elbo(state: MixtureState, batch: np.ndarray, resp: np.ndarray) -> float:
    """Mean-field evidence lower bound on the batch under the given posterior."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    resp = np.asarray(resp, dtype=float)
    if resp.shape != (batch.shape[0], state.n_components):
        raise ValueError("responsibility shape does not match batch and state")
    return surrogate_elbo(state, accumulate_stats(batch, resp)) + resp_entropy(resp)
