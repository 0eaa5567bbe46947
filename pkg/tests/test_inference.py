import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiershape.data import GroupedDataset, HiddenState, SampleSet
from hiershape.geometry import geodesic_distance, is_preshape, resample_closed, rotation_2d, to_preshape
from hiershape.inference import (EMConfig, cyclic_template, fit, initialize, m_step,
                                 posterior_means, q_hat, top_eigenvalues)
from hiershape.model import KernelConfig, PopulationParams
from hiershape.sampler import HMCConfig


def ellipse(t, a=1.0, b=0.6, phase=0.0):
    s = phase + 2 * np.pi * np.arange(t) / t
    return np.column_stack([a * np.cos(s), b * np.sin(s)])


def random_samples(rng, t=4, sizes=(3, 2), n_sweeps=5):
    return SampleSet([
        HiddenState([np.stack([to_preshape(rng.normal(size=(t, 2))) for _ in range(n)]) for n in sizes],
                    np.stack([to_preshape(rng.normal(size=(t, 2))) for _ in sizes]))
        for _ in range(n_sweeps)
    ])


def naive_outer_mean(vectors):
    n = len(vectors[0])
    out = np.zeros((n, n))
    for v in vectors:
        for i in range(n):
            for j in range(n):
                out[i, j] += v[i] * v[j]
    return out / len(vectors)


def quick_config(**kw):
    base = dict(max_iter=3, n_samples=5, burn_in=1, hmc=HMCConfig(step_size=5e-3, n_leapfrog=5, seed=3))
    base.update(kw)
    return EMConfig(**base)


class TestEMConfig:
    def test_rejects_nonpositive_tolerance(self):
        with pytest.raises(ValueError):
            EMConfig(tol=0.0)

    def test_rejects_unknown_covariance_init(self):
        with pytest.raises(ValueError):
            EMConfig(init_covariance="bogus")

    def test_betas_broadcast_and_validate(self):
        assert EMConfig(betas=[2.0]).group_betas(3) == [2.0, 2.0, 2.0]
        with pytest.raises(ValueError):
            EMConfig(betas=[1.0, 2.0]).group_betas(3)


class TestInitialize:
    def test_identical_data_gives_identical_shapes(self):
        x = ellipse(12)
        data = GroupedDataset(["a", "b"], [[x, x.copy()], [x.copy(), x.copy()]], 12)
        state, params = initialize(data, EMConfig())
        for u in state.shapes():
            np.testing.assert_allclose(u, to_preshape(x), atol=1e-12)
        # zero-variance sample means: an M step on the initial state gives zero covariances
        ms = m_step(SampleSet([state]), params)
        np.testing.assert_allclose(ms.group_covariances[0], 0, atol=1e-20)
        np.testing.assert_allclose(ms.covariance, 0, atol=1e-20)

    def test_matching_point_count_uses_preshape_directly(self):
        rng = np.random.default_rng(0)
        groups = [[rng.normal(size=(7, 2)) for _ in range(2)] for _ in range(2)]
        state, _ = initialize(GroupedDataset(["a", "b"], groups, 7), EMConfig(cyclic_init=False))
        for grp, us in zip(groups, state.individuals):
            for x, u in zip(grp, us):
                np.testing.assert_allclose(u, to_preshape(x), atol=1e-12)

    def test_identity_covariances(self):
        rng = np.random.default_rng(1)
        groups = [[rng.normal(size=(5, 2)) for _ in range(2)] for _ in range(2)]
        _, params = initialize(GroupedDataset(["a", "b"], groups, 5), EMConfig(init_covariance="identity"))
        for c in [params.covariance, *params.group_covariances]:
            np.testing.assert_array_equal(c, 0.01 * np.eye(10))

    def test_empirical_covariances_are_one_m_step(self):
        rng = np.random.default_rng(2)
        groups = [[rng.normal(size=(5, 2)) for _ in range(3)] for _ in range(2)]
        data = GroupedDataset(["a", "b"], groups, 5)
        cfg = EMConfig(init_covariance="empirical", cyclic_init=False)
        state, params = initialize(data, cfg)
        expected = m_step(SampleSet([state]), None, epsilon=cfg.epsilon)
        np.testing.assert_allclose(params.group_covariances[1], expected.group_covariances[1], atol=1e-15)

    def test_circle_resampled_to_fewer_points(self):
        circle = ellipse(64, 1.0, 1.0)
        out = resample_closed(circle, 32)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-3)
        angles = np.unwrap(np.arctan2(out[:, 1], out[:, 0]))
        np.testing.assert_allclose(np.diff(angles), 2 * np.pi / 32, atol=1e-3)

    def test_unequal_point_counts_are_resampled(self):
        groups = [[ellipse(40), ellipse(24)], [ellipse(30, 1.0, 0.5), ellipse(16, 1.0, 0.5)]]
        state, params = initialize(GroupedDataset(["a", "b"], groups, 16), EMConfig())
        assert all(u.shape == (16, 2) and is_preshape(u) for u in state.shapes())
        assert is_preshape(params.mean)

    def test_cyclic_init_undoes_index_shifts(self):
        base = ellipse(20, 1.0, 0.4) + np.column_stack([np.zeros(20), 0.3 * (np.arange(20) == 4)])
        groups = [[base, np.roll(base, 7, axis=0)], [np.roll(base, 13, axis=0), np.roll(base, 2, axis=0)]]
        state, _ = initialize(GroupedDataset(["a", "b"], groups, 20), EMConfig())
        ref = state.individuals[0][0]
        for u in state.shapes():
            np.testing.assert_allclose(u, ref, atol=1e-12)

    def test_group_means_rotated_onto_first(self):
        x = ellipse(10, 1.0, 0.5)
        spun = x @ rotation_2d(0.8).T
        state, _ = initialize(GroupedDataset(["a", "b"], [[x, x], [spun, spun]], 10), EMConfig(cyclic_init=False))
        np.testing.assert_allclose(state.group_means[1], state.group_means[0], atol=1e-12)


class TestCyclicTemplate:
    def test_keeps_pose_without_rotation(self):
        x = to_preshape(ellipse(12, 1.0, 0.3))
        ref, fitted = cyclic_template([x, np.roll(x, 5, axis=0)])
        np.testing.assert_allclose(fitted[1], x, atol=1e-12)
        np.testing.assert_allclose(ref, x, atol=1e-12)

    def test_rotation_mode_aligns_pose(self):
        x = to_preshape(ellipse(12, 1.0, 0.3))
        spun = np.roll(x, 3, axis=0) @ rotation_2d(0.5).T
        _, fitted = cyclic_template([x, spun], rotate=True)
        np.testing.assert_allclose(fitted[1], x, atol=1e-10)


class TestMStep:
    def test_zero_deviation_gives_zero_covariance(self):
        m = to_preshape(ellipse(6))
        state = HiddenState([np.stack([m, m]), np.stack([m, m, m])], np.stack([m, m]))
        out = m_step(SampleSet([state]), None)
        np.testing.assert_array_equal(out.group_covariances[0], 0)
        np.testing.assert_allclose(out.mean, m, atol=1e-15)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_naive_summation(self, seed):
        rng = np.random.default_rng(seed)
        samples = random_samples(rng)
        out = m_step(samples, None)
        for g in range(2):
            devs = [(u - st.group_means[g]).ravel() for st in samples.sweeps for u in st.individuals[g]]
            np.testing.assert_allclose(out.group_covariances[g], naive_outer_mean(devs), atol=1e-12, rtol=0)
        total = np.zeros((4, 2))
        for st in samples.sweeps:
            for m in st.group_means:
                total += m
        mean = to_preshape(total / (2 * len(samples)))
        np.testing.assert_allclose(out.mean, mean, atol=1e-12, rtol=0)
        devs = [(m - mean).ravel() for st in samples.sweeps for m in st.group_means]
        np.testing.assert_allclose(out.covariance, naive_outer_mean(devs), atol=1e-12, rtol=0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_covariances_symmetric_psd(self, seed):
        out = m_step(random_samples(np.random.default_rng(seed), t=5), None)
        for c in [out.covariance, *out.group_covariances]:
            np.testing.assert_array_equal(c, c.T)
            assert np.linalg.eigvalsh(c).min() >= -1e-10
        assert is_preshape(out.mean)

    def test_keeps_previous_ridge(self):
        samples = random_samples(np.random.default_rng(5))
        prev = PopulationParams(samples.sweeps[0].group_means[0], np.eye(8), [np.eye(8)] * 2, 0.37)
        assert m_step(samples, prev).epsilon == 0.37

    @pytest.mark.parametrize("seed", range(5))
    def test_q_hat_does_not_decrease(self, seed):
        rng = np.random.default_rng(seed)
        samples = random_samples(rng, t=5)
        data = GroupedDataset(["a", "b"], [[rng.normal(size=(5, 2)) for _ in range(n)] for n in (3, 2)], 5)
        before = PopulationParams(to_preshape(rng.normal(size=(5, 2))), 0.02 * np.eye(10),
                                  [0.05 * np.eye(10), 0.03 * np.eye(10)], 1e-4)
        after = m_step(samples, before)
        kernel = KernelConfig(0.4)
        assert q_hat(samples, data, after, kernel) >= q_hat(samples, data, before, kernel)


class TestPosteriorMeans:
    def test_constant_sweeps_return_state(self):
        rng = np.random.default_rng(6)
        samples = random_samples(rng, n_sweeps=1)
        ref = samples.sweeps[0].group_means[0]
        means, individuals = posterior_means(samples, ref)
        np.testing.assert_allclose(means[0], ref, atol=1e-12)
        assert all(is_preshape(u) for grp in individuals for u in grp)


def test_top_eigenvalues_descending():
    c = np.diag([0.1, 3.0, 2.0, 0.5, 0.0, 1.0])
    np.testing.assert_allclose(top_eigenvalues(c), [3.0, 2.0, 1.0, 0.5, 0.1])


class TestFit:
    def test_identical_noiseless_shapes(self):
        x = ellipse(16, 1.0, 0.5) + np.column_stack([np.zeros(16), 0.2 * np.sin(3 * np.linspace(0, 2 * np.pi, 16, endpoint=False))])
        data = GroupedDataset(["a", "b"], [[x] * 3, [x] * 3], 16)
        # identical data start every covariance at zero, so the ridge alone sets the spread
        cfg = EMConfig(max_iter=5, n_samples=20, burn_in=5, init_covariance="empirical", epsilon=1e-6,
                       betas=[0.0], hmc=HMCConfig(seed=1))
        res = fit(data, cfg)
        assert res.n_iter <= 5
        target = to_preshape(x)
        for m in res.group_means:
            assert geodesic_distance(m, target) < 5e-2

    def test_seeded_determinism(self):
        rng = np.random.default_rng(7)
        groups = [[ellipse(10) + rng.normal(scale=0.05, size=(10, 2)) for _ in range(2)] for _ in range(2)]
        data = GroupedDataset(["a", "b"], groups, 10)
        a, b = fit(data, quick_config()), fit(data, quick_config())
        np.testing.assert_array_equal(a.params.vector(), b.params.vector())
        np.testing.assert_array_equal(a.group_means, b.group_means)
        assert a.q_trace == b.q_trace

    def test_result_contents(self):
        rng = np.random.default_rng(8)
        groups = [[ellipse(10) + rng.normal(scale=0.05, size=(10, 2)) for _ in range(n)] for n in (2, 3)]
        seen = []
        res = fit(GroupedDataset(["a", "b"], groups, 10), quick_config(),
                  callback=lambda it, samples, params: seen.append((it, len(samples))))
        assert seen == [(1, 5), (2, 5), (3, 5)]
        assert res.n_iter == 3 and len(res.q_trace) == 3 and len(res.change_trace) == 3
        assert [u.shape for u in res.individuals] == [(2, 10, 2), (3, 10, 2)]
        assert all(is_preshape(u) for grp in res.individuals for u in grp)
        assert all(is_preshape(m) for m in res.group_means)
        spectra = res.spectra()
        assert set(spectra) == {"before", "after"}
        assert set(spectra["after"]) == {"C_a", "C_b", "C"}
        assert all(0 <= r <= 1 for r in res.acceptance.values())

    def test_trace_files(self, tmp_path):
        rng = np.random.default_rng(9)
        groups = [[ellipse(8) + rng.normal(scale=0.05, size=(8, 2)) for _ in range(2)] for _ in range(2)]
        fit(GroupedDataset(["a", "b"], groups, 8), quick_config(max_iter=2, trace_dir=str(tmp_path)))
        assert sorted(p.name for p in tmp_path.iterdir()) == ["trace_001.csv", "trace_002.csv"]

    def test_single_group_rejected(self):
        with pytest.raises(ValueError):
            fit(GroupedDataset(["a"], [[ellipse(8)]], 8), quick_config())

    def test_nonconvergence_is_a_flag(self):
        rng = np.random.default_rng(10)
        groups = [[ellipse(8) + rng.normal(scale=0.05, size=(8, 2)) for _ in range(2)] for _ in range(2)]
        res = fit(GroupedDataset(["a", "b"], groups, 8), quick_config(max_iter=1, tol=1e-12))
        assert not res.converged and res.n_iter == 1
