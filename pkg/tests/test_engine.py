import copy

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from knowspace.engine import (
    BatchCache,
    FitReport,
    InferenceConfig,
    birth_move,
    fit_stream,
    merge_move,
    prune,
    total_stats,
)
from knowspace.mixture import (
    MixtureState,
    NIGHyper,
    SuffStats,
    accumulate_stats,
    local_step,
    seed_state,
)


def two_cluster_stream(seed=0, n_per=200, means=(-5.0, 5.0)):
    rng = np.random.default_rng(seed)
    xs, labels = [], []
    for li, mu in enumerate(means):
        xs.append(rng.normal(mu, 1.0, size=(n_per, 1)))
        labels.extend([li] * n_per)
    batches = [(f"b{i}", x) for i, x in enumerate(xs)]
    data = np.vstack(xs)
    return batches, data, np.array(labels)


def default_config(**kw):
    base = dict(passes=20, birth_enabled=True, birth_pool_min=10,
                birth_loglik_percentile=25.0, merge_enabled=True,
                merge_candidate_count=5, elbo_tol=1e-6)
    base.update(kw)
    return InferenceConfig(**base)


class TestFitStream:
    def test_single_gaussian(self):
        rng = np.random.default_rng(1)
        batch = rng.normal(2.0, 1.0, size=(300, 1))
        hyper = NIGHyper.from_data(batch)
        state = MixtureState(hyper)
        state, caches, report = fit_stream(
            state, {}, [("b0", batch)], default_config(passes=5), task_id=0)
        assert report.final_K == 1
        assert abs(state.m[0, 0] - batch.mean()) < 0.2

    def test_two_gaussians_recovered(self):
        batches, data, labels = two_cluster_stream()
        hyper = NIGHyper.from_data(data)
        state = MixtureState(hyper)
        state, caches, report = fit_stream(state, {}, batches,
                                           default_config(), task_id=0)
        assert report.final_K == 2
        resp = local_step(state, data)
        ari = adjusted_rand_score(labels, resp.argmax(axis=1))
        assert ari >= 0.95

    def test_deterministic_refit(self):
        batches, data, _ = two_cluster_stream(seed=3)
        hyper = NIGHyper.from_data(data)
        cfg = default_config()
        _, _, r1 = fit_stream(MixtureState(hyper), {}, batches, cfg, task_id=0)
        _, _, r2 = fit_stream(MixtureState(hyper), {}, batches, cfg, task_id=0)
        assert r1.elbo_trace == r2.elbo_trace
        assert r1.births_accepted == r2.births_accepted

    def test_elbo_trace_nondecreasing_without_moves(self):
        batches, data, _ = two_cluster_stream(seed=5)
        hyper = NIGHyper.from_data(data)
        cfg = default_config(birth_enabled=False, merge_enabled=False, passes=10)
        _, _, report = fit_stream(MixtureState(hyper), {}, batches, cfg, task_id=0)
        trace = report.elbo_trace
        for prev, cur in zip(trace, trace[1:]):
            assert cur >= prev - 1e-6 * max(1.0, abs(prev))

    def test_memoization_invariant_across_revisits(self):
        rng = np.random.default_rng(7)
        batches = [(f"b{i}", rng.normal(i % 3, 1.0, size=(40, 2)))
                   for i in range(6)]
        all_data = np.vstack([b for _, b in batches])
        hyper = NIGHyper.from_data(all_data)
        state = MixtureState(hyper)
        caches = {}
        cfg = default_config(passes=1)
        for step in range(50):
            pick = batches[int(rng.integers(0, len(batches)))]
            state, caches, _ = fit_stream(state, caches, [pick], cfg,
                                          task_id=step % 4)
            agg = total_stats(caches, state.n_components, state.dim)
            direct = [caches[k].stats.padded(state.n_components)
                      for k in sorted(caches)]
            manual = direct[0]
            for s in direct[1:]:
                manual = manual + s
            assert np.allclose(agg.count, manual.count, atol=1e-6)
            assert np.allclose(agg.sum, manual.sum, atol=1e-6)
            assert np.allclose(agg.sumsq, manual.sumsq, atol=1e-6)

    def test_errors(self):
        hyper = NIGHyper(m0=np.zeros(2), kappa0=1.0, a0=1.0, b0=np.ones(2))
        with pytest.raises(ValueError, match="empty stream"):
            fit_stream(MixtureState(hyper), {}, [], default_config(), 0)
        with pytest.raises(ValueError, match="dimension mismatch"):
            fit_stream(MixtureState(hyper), {}, [np.zeros((3, 5))],
                       default_config(), 0)


class TestBirthMove:
    def _fitted_state(self, data, task_id=0):
        hyper = NIGHyper.from_data(data)
        state = MixtureState(hyper)
        cfg = default_config(birth_enabled=False, merge_enabled=False, passes=5)
        return fit_stream(state, {}, [("b0", data)], cfg, task_id=task_id)

    def test_birth_accepted_for_novel_cluster(self):
        rng = np.random.default_rng(9)
        old = rng.normal(0.0, 1.0, size=(200, 1))
        state, caches, _ = self._fitted_state(old)
        novel = rng.normal(10.0, 1.0, size=(100, 1))
        cfg = default_config()
        state2, caches2, report = fit_stream(state, caches, [("b1", novel)],
                                             cfg, task_id=1)
        assert report.births_accepted >= 1
        assert state2.n_components == state.n_components + 1
        assert int(state2.created_task[-1]) == 1

    def test_birth_rejected_for_familiar_data(self):
        rng = np.random.default_rng(10)
        rejections = 0
        for rep in range(20):
            data = rng.normal(0.0, 1.0, size=(200, 1))
            state, caches, _ = self._fitted_state(data)
            more = rng.normal(0.0, 1.0, size=(100, 1))
            _, _, report = fit_stream(state, caches, [("b1", more)],
                                      default_config(passes=1), task_id=1)
            rejections += report.births_accepted == 0
        assert rejections == 20

    def test_disabled_birth_is_identity(self):
        rng = np.random.default_rng(11)
        data = rng.normal(0.0, 1.0, size=(100, 1))
        state, caches, _ = self._fitted_state(data)
        agg = total_stats(caches, state.n_components, state.dim)
        resp = local_step(state, data)
        cfg = default_config(birth_enabled=False)
        s2, c2, a2, accepted = birth_move(state, caches, agg, "b0", data,
                                          resp, cfg, task_id=1)
        assert not accepted
        assert s2 is state and c2 is caches and a2 is agg

    def test_rejected_birth_restores_exactly(self):
        rng = np.random.default_rng(12)
        data = rng.normal(0.0, 1.0, size=(200, 1))
        state, caches, _ = self._fitted_state(data)
        agg = total_stats(caches, state.n_components, state.dim)
        resp = local_step(state, data)
        snapshot = copy.deepcopy((state.m, state.kappa, state.a, state.b,
                                  state.eta1, state.eta0))
        cfg = default_config(birth_pool_min=1)
        s2, c2, a2, accepted = birth_move(state, caches, agg, "b0", data,
                                          resp, cfg, task_id=1)
        if not accepted:
            assert np.array_equal(s2.m, snapshot[0])
            assert np.array_equal(s2.eta0, snapshot[5])


class TestMergeMove:
    def test_duplicate_components_merge_once(self):
        rng = np.random.default_rng(13)
        data = rng.normal(0.0, 1.0, size=(300, 1))
        hyper = NIGHyper.from_data(data)
        state = seed_state(hyper, data)
        # duplicate the component by splitting the stats in half
        resp = np.tile([0.5, 0.5], (300, 1))
        stats = accumulate_stats(data, resp)
        from knowspace.mixture import append_component, global_step
        state = append_component(state, SuffStats(stats.count[1:], stats.sum[1:],
                                                  stats.sumsq[1:]), 0)
        state = global_step(state, stats)
        caches = {"b0": BatchCache("b0", stats, 0.0)}
        agg = total_stats(caches, 2, 1)
        cfg = default_config()
        s2, c2, a2, merged = merge_move(state, caches, agg, cfg)
        assert merged == 1
        assert s2.n_components == 1
        assert a2.count[0] == pytest.approx(300.0, abs=1e-6)

    def test_separated_components_never_merge(self):
        batches, data, _ = two_cluster_stream(seed=14)
        hyper = NIGHyper.from_data(data)
        state, caches, _ = fit_stream(MixtureState(hyper), {}, batches,
                                      default_config(), task_id=0)
        assert state.n_components == 2
        agg = total_stats(caches, 2, 1)
        _, _, _, merged = merge_move(state, caches, agg, default_config())
        assert merged == 0

    def test_merge_noop_below_two_components(self):
        rng = np.random.default_rng(15)
        data = rng.normal(size=(50, 1))
        hyper = NIGHyper.from_data(data)
        state = seed_state(hyper, data)
        caches = {}
        agg = total_stats(caches, 1, 1)
        s2, _, _, merged = merge_move(state, caches, agg, default_config())
        assert merged == 0 and s2 is state

    def test_merge_inherits_older_provenance(self):
        rng = np.random.default_rng(16)
        data = rng.normal(0.0, 1.0, size=(300, 1))
        hyper = NIGHyper.from_data(data)
        state = seed_state(hyper, data, task_id=0)
        resp = np.tile([0.5, 0.5], (300, 1))
        stats = accumulate_stats(data, resp)
        from knowspace.mixture import append_component, global_step
        state = append_component(state, SuffStats(stats.count[1:], stats.sum[1:],
                                                  stats.sumsq[1:]), 3)
        state = global_step(state, stats)
        caches = {"b0": BatchCache("b0", stats, 0.0)}
        agg = total_stats(caches, 2, 1)
        s2, _, _, merged = merge_move(state, caches, agg, default_config())
        assert merged == 1
        assert int(s2.created_task[0]) == 0


class TestPrune:
    def _state(self):
        rng = np.random.default_rng(17)
        data = rng.normal(size=(100, 2))
        hyper = NIGHyper.from_data(data)
        state = seed_state(hyper, data)
        from knowspace.mixture import append_component
        tiny = SuffStats(np.array([1e-8]), np.zeros((1, 2)), np.zeros((1, 2)))
        state = append_component(state, tiny, 1)
        caches = {"b0": BatchCache("b0", SuffStats(
            np.array([100.0, 1e-8]), np.zeros((2, 2)), np.ones((2, 2))), 0.0)}
        return state, caches

    def test_zero_threshold_is_identity(self):
        state, caches = self._state()
        s2, c2 = prune(state, caches, 0.0)
        assert s2 is state and c2 is caches

    def test_prunes_tiny_component(self):
        state, caches = self._state()
        s2, c2 = prune(state, caches, 1e-6)
        assert s2.n_components == state.n_components - 1
        assert c2["b0"].stats.count.shape == (s2.n_components,)

    def test_remaining_counts_preserved(self):
        state, caches = self._state()
        s2, _ = prune(state, caches, 1e-6)
        assert s2.soft_count.sum() == pytest.approx(
            state.soft_count.sum() - 1e-8, abs=1e-9)


class TestConfigValidation:
    def test_bad_passes(self):
        with pytest.raises(ValueError):
            InferenceConfig(passes=0)

    def test_bad_percentile(self):
        with pytest.raises(ValueError):
            InferenceConfig(birth_loglik_percentile=100.0)
