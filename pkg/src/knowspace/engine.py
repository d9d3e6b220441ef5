"""Memoized variational Bayes over a stream of batches.

Per-batch sufficient statistics are cached so a revisited batch can be
subtracted out and replaced exactly; the global aggregate always equals the
sum of the caches.  Birth moves grow the component set from poorly explained
points, merge moves compact it; both are gated on the variational objective
and restore state exactly when rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mixture import (
    MixtureState,
    SuffStats,
    accumulate_stats,
    append_component,
    elbo,
    expected_log_likelihood_matrix,
    global_step,
    local_step,
    resp_entropy,
    seed_state,
    sum_stats,
    surrogate_elbo,
)


@dataclass
class BatchCache:
    """Last-visit statistics for one batch; entropy memoizes the ELBO term."""

    batch_id: str
    stats: SuffStats
    resp_entropy: float = 0.0


@dataclass
class InferenceConfig:
    passes: int = 4
    birth_enabled: bool = True
    birth_pool_min: int = 10
    birth_loglik_percentile: float = 25.0
    merge_enabled: bool = True
    merge_candidate_count: int = 5
    prune_count_threshold: float = 0.0
    rng_seed: int = 0
    elbo_tol: float = 1e-6

    def __post_init__(self):
        if self.passes < 1:
            raise ValueError("passes must be >= 1")
        if not (0.0 < self.birth_loglik_percentile < 100.0):
            raise ValueError("birth_loglik_percentile must lie in (0, 100)")
        if self.elbo_tol <= 0:
            raise ValueError("elbo_tol must be positive")
        if self.prune_count_threshold < 0:
            raise ValueError("prune_count_threshold must be nonnegative")


@dataclass
class FitReport:
    elbo_trace: list = field(default_factory=list)
    births_accepted: int = 0
    merges_accepted: int = 0
    final_K: int = 0
    provenance: dict = field(default_factory=dict)


def total_stats(caches: dict[str, BatchCache], n_components: int, dim: int) -> SuffStats:
    """Compensated sum of all cached statistics, in sorted batch-id order."""
    ordered = [caches[k].stats for k in sorted(caches)]
    return sum_stats(ordered, n_components, dim)


def _memo_elbo(state: MixtureState, aggregate: SuffStats,
               caches: dict[str, BatchCache]) -> float:
    """Full variational objective with memoized per-batch entropies."""
    ent = sum(caches[k].resp_entropy for k in sorted(caches))
    return surrogate_elbo(state, aggregate) + ent


def fit_stream(state: MixtureState, caches: dict[str, BatchCache],
               batches, config: InferenceConfig, task_id: int,
               ) -> tuple[MixtureState, dict[str, BatchCache], FitReport]:
    """Multi-pass memoized coordinate ascent over an ordered batch stream.

    `batches` is a sequence of (batch_id, array) pairs; bare arrays get ids
    derived from the task and position.  Caches carry over between calls, so
    re-presenting a known batch id replaces its contribution exactly.
    """
    items = []
    for i, entry in enumerate(batches):
        if isinstance(entry, tuple):
            bid, arr = entry
        else:
            bid, arr = f"t{task_id}/b{i}", entry
        arr = np.atleast_2d(np.asarray(arr, dtype=float))
        if arr.shape[0] == 0:
            raise ValueError("empty batch in stream")
        if arr.shape[1] != state.dim:
            raise ValueError(f"dimension mismatch: batch has {arr.shape[1]}, "
                             f"state has {state.dim}")
        items.append((str(bid), arr))
    if not items:
        raise ValueError("empty stream")

    caches = dict(caches)
    report = FitReport()

    if state.n_components == 0:
        state = seed_state(state.hyper, items[0][1], task_id=task_id)

    aggregate = total_stats(caches, state.n_components, state.dim)

    for _ in range(config.passes):
        for bid, batch in items:
            if bid in caches:
                aggregate = aggregate - caches[bid].stats.padded(state.n_components)
            resp = local_step(state, batch)
            fresh = accumulate_stats(batch, resp)
            aggregate = aggregate + fresh
            caches[bid] = BatchCache(bid, fresh, resp_entropy(resp))
            state = global_step(state, aggregate)

            if config.birth_enabled:
                state, caches, aggregate, accepted = birth_move(
                    state, caches, aggregate, bid, batch, resp, config, task_id)
                if accepted:
                    report.births_accepted += 1

        if config.merge_enabled and state.n_components >= 2:
            state, caches, aggregate, n_merged = merge_move(
                state, caches, aggregate, config)
            report.merges_accepted += n_merged

        report.elbo_trace.append(_memo_elbo(state, aggregate, caches))

    report.final_K = state.n_components
    report.provenance = {k: int(state.created_task[k])
                         for k in range(state.n_components)}
    return state, caches, report


def _restricted_ascent(state: MixtureState, caches: dict[str, BatchCache],
                       agg_minus: SuffStats, batch_id: str, batch: np.ndarray,
                       tol: float, max_sweeps: int = 50):
    """Local/global sweeps on one batch until the memoized ELBO stalls."""
    caches = dict(caches)
    aggregate = None
    after = -np.inf
    for _ in range(max_sweeps):
        resp = local_step(state, batch)
        fresh = accumulate_stats(batch, resp)
        aggregate = agg_minus + fresh
        state = global_step(state, aggregate)
        caches[batch_id] = BatchCache(batch_id, fresh, resp_entropy(resp))
        prev, after = after, _memo_elbo(state, aggregate, caches)
        if after - prev <= tol:
            break
    return state, caches, aggregate, after


def birth_move(state: MixtureState, caches: dict[str, BatchCache],
               aggregate: SuffStats, batch_id: str, batch: np.ndarray,
               resp: np.ndarray, config: InferenceConfig, task_id: int):
    """Propose one component from the batch's poorly explained points.

    The proposal is hard-seeded from the pool and refined by restricted
    local/global sweeps on the batch until the objective stops moving; the
    same converged sweeps are run on a no-birth baseline so the gate credits
    only the new component, not generic sweep progress.  Accepted iff the
    converged memoized ELBO beats the baseline by more than elbo_tol;
    otherwise all inputs are returned untouched.
    """
    if not config.birth_enabled:
        return state, caches, aggregate, False

    best = expected_log_likelihood_matrix(state, batch).max(axis=1)
    threshold = np.percentile(best, config.birth_loglik_percentile)
    in_pool = best <= threshold
    if int(in_pool.sum()) < config.birth_pool_min:
        return state, caches, aggregate, False
    # the raw pool can straddle several unmodeled regions (e.g. the opposite
    # tails of one broad component); keep only the half nearest the single
    # worst-explained point so the seed is spatially coherent
    pool_idx = np.flatnonzero(in_pool)
    worst = batch[pool_idx[np.argmin(best[pool_idx])]]
    dist = np.linalg.norm(batch[pool_idx] - worst, axis=1)
    near = pool_idx[dist <= np.median(dist)]
    if near.size >= config.birth_pool_min:
        in_pool = np.zeros_like(in_pool)
        in_pool[near] = True
    pool = batch[in_pool]

    pool_stats = SuffStats(np.array([float(pool.shape[0])]),
                           pool.sum(axis=0)[None, :],
                           (pool ** 2).sum(axis=0)[None, :])
    cand = append_component(state, pool_stats, task_id)
    agg_minus = aggregate.padded(cand.n_components) - caches[batch_id].stats.padded(cand.n_components)

    # hard-seed the pool onto the proposal so the stick counts reflect it,
    # then run restricted local/global sweeps on the batch until converged
    resp0 = np.hstack([resp, np.zeros((resp.shape[0], 1))])
    resp0[in_pool, :-1] = 0.0
    resp0[in_pool, -1] = 1.0
    cand = global_step(cand, agg_minus + accumulate_stats(batch, resp0))
    # initialize the proposal at the pool's own moments: the conjugate
    # prior-mean shift would inflate a small far-away pool's scale enough for
    # the first sweep to starve it; later global steps restore exact
    # conjugacy once the component holds real mass
    pool_mean = pool.mean(axis=0)
    pool_scatter = ((pool - pool_mean) ** 2).sum(axis=0)
    cand.m[-1] = pool_mean
    cand.b[-1] = np.maximum(state.hyper.b0 + 0.5 * pool_scatter, 1e-12)

    base_minus = aggregate - caches[batch_id].stats.padded(state.n_components)
    _, _, _, before = _restricted_ascent(state, caches, base_minus,
                                         batch_id, batch, config.elbo_tol)
    cand, new_caches, agg_new, after = _restricted_ascent(
        cand, caches, agg_minus, batch_id, batch, config.elbo_tol)
    # a proposal that ends up explaining (almost) nothing is dead weight even
    # when sweep noise nudges the objective past the baseline
    if cand.soft_count[-1] < 1.0 or after <= before + config.elbo_tol:
        return state, caches, aggregate, False
    return cand, new_caches, agg_new, True


def _pair_distances(state: MixtureState) -> list[tuple[float, int, int]]:
    """Candidate merge pairs ranked by scaled distance between posterior means."""
    K = state.n_components
    scale_sq = (state.b / state.a[:, None]).mean(axis=1)  # E[precision]^-1 per comp
    out = []
    for i in range(K):
        for j in range(i + 1, K):
            pooled = np.sqrt(0.5 * (scale_sq[i] + scale_sq[j]))
            dist = float(np.linalg.norm(state.m[i] - state.m[j])) / max(pooled, 1e-12)
            out.append((dist, i, j))
    out.sort()
    return out


def _merge_entropy_bound(n_i: float, n_j: float) -> float:
    """Upper bound on the responsibility entropy lost by fusing two columns.

    Summing columns i and j loses sum_n h(r_ni) + h(r_nj) - h(r_ni + r_nj),
    which by concavity is at most the binary entropy of the aggregate masses,
    (N_i + N_j) * H(N_i / (N_i + N_j)).  The bound is tight for exact
    duplicates and vanishes when one component is empty, so charging it keeps
    the memoized objective a true lower bound after the merge.
    """
    total = n_i + n_j
    if total <= 0.0:
        return 0.0
    p = min(max(n_i / total, 0.0), 1.0)
    h = 0.0
    for q in (p, 1.0 - p):
        if q > 0.0:
            h -= q * np.log(q)
    return total * h


def merge_move(state: MixtureState, caches: dict[str, BatchCache],
               aggregate: SuffStats, config: InferenceConfig):
    """Try to fuse the closest component pairs, gated on the surrogate ELBO."""
    if state.n_components < 2:
        return state, caches, aggregate, 0

    merges = 0
    tried = 0
    while state.n_components >= 2 and tried < config.merge_candidate_count:
        candidates = _pair_distances(state)
        accepted_any = False
        for _, i, j in candidates:
            if tried >= config.merge_candidate_count:
                break
            tried += 1
            merged_agg = aggregate.merged(i, j)
            keep = [k for k in range(state.n_components) if k != j]
            cand = state.select(keep)
            # inherit the older provenance of the pair
            pos = keep.index(i)
            cand.created_task[pos] = min(int(state.created_task[i]),
                                         int(state.created_task[j]))
            cand = global_step(cand, merged_agg)
            before = surrogate_elbo(state, aggregate)
            penalty = _merge_entropy_bound(float(aggregate.count[i]),
                                           float(aggregate.count[j]))
            after = surrogate_elbo(cand, merged_agg) - penalty
            if after >= before - config.elbo_tol:
                state = cand
                aggregate = merged_agg
                caches = {bid: BatchCache(bid, c.stats.padded(len(keep) + 1).merged(i, j),
                                          c.resp_entropy)
                          for bid, c in caches.items()}
                merges += 1
                accepted_any = True
                break
        if not accepted_any:
            break
    return state, caches, aggregate, merges


def prune(state: MixtureState, caches: dict[str, BatchCache],
          threshold: float = 0.0):
    """Drop components whose soft count falls below the threshold."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    if threshold == 0.0 or state.n_components == 0:
        return state, caches
    keep = np.flatnonzero(state.soft_count >= threshold)
    if keep.size == state.n_components:
        return state, caches
    new_state = state.select(keep)
    new_caches = {}
    for bid, c in caches.items():
        s = c.stats.padded(state.n_components)
        new_caches[bid] = BatchCache(
            bid, SuffStats(s.count[keep], s.sum[keep], s.sumsq[keep]),
            c.resp_entropy)
    return new_state, new_caches
