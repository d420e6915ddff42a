import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from martssl import datagen
from martssl.datagen import (Dataset, SplitSpec, gen_ssim, gen_tsim,
                             gen_tsim_rc, oracle_conditional_sample, split)
from martssl.rng import Rng


def lyapunov_fixed_point(a, q, iters=2000, tol=1e-12):
    # independent oracle: iterate S <- A S A^T + Q to the fixed point
    s = q.copy()
    for _ in range(iters):
        s_next = a @ s @ a.T + q
        if np.abs(s_next - s).max() < tol:
            return s_next
        s = s_next
    return s


class TestTsimRc:
    def test_shapes_and_classes(self):
        ds = gen_tsim_rc(50, seed=0)
        assert ds.X.shape == (50, 16, 16)
        assert ds.y.shape == (50,)
        assert ds.y.min() >= 0 and ds.y.max() < 5

    def test_stationary_covariance_matches_fixed_point_oracle(self):
        ds = gen_tsim_rc(2, seed=1, alpha=0.0)
        a = ds.gen_params["A"]
        sigma = ds.gen_params["sigma"]
        cov = ds.gen_params["Sigma0"]
        oracle = lyapunov_fixed_point(a, sigma ** 2 * np.eye(16))
        assert np.abs(a @ cov @ a.T + sigma ** 2 * np.eye(16) - cov).max() < 1e-8
        assert np.abs(cov - oracle).max() < 1e-8

    def test_determinism(self):
        d1, d2 = gen_tsim_rc(20, seed=7), gen_tsim_rc(20, seed=7)
        assert np.array_equal(d1.X, d2.X) and np.array_equal(d1.y, d2.y)

    def test_transition_is_stable_lower_triangular(self):
        a = gen_tsim_rc(2, seed=3).gen_params["A"]
        assert np.allclose(a, np.tril(a))
        assert np.abs(np.linalg.eigvals(a)).max() < 0.95

    def test_labels_depend_only_on_final_window(self):
        ds = gen_tsim_rc(100, seed=5)
        w = ds.gen_params["window_weights"]
        summary = np.tensordot(w, ds.X[:, -5:, :], axes=(0, 1))
        y = np.argmax(summary @ ds.gen_params["W_label"].T, axis=1)
        assert np.array_equal(y, ds.y)

    def test_label_purity_under_early_frame_perturbation(self):
        ds = gen_tsim_rc(50, seed=9)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = ds.X.copy()
            x[:, :11, :] += rng.normal(size=x[:, :11, :].shape)
            w = ds.gen_params["window_weights"]
            summary = np.tensordot(w, x[:, -5:, :], axes=(0, 1))
            y = np.argmax(summary @ ds.gen_params["W_label"].T, axis=1)
            assert np.array_equal(y, ds.y)


class TestTsim:
    def test_shapes_and_classes(self):
        ds = gen_tsim(40, seed=0)
        assert ds.X.shape == (40, 16, 32)
        assert ds.n_classes == 5

    def test_permuting_nonlabel_frames_keeps_labels(self):
        ds = gen_tsim(80, seed=2)
        frames = set(ds.gen_params["label_frames"].tolist())
        other = [t for t in range(16) if t not in frames]
        rng = np.random.default_rng(1)
        for _ in range(10):
            perm = rng.permutation(other)
            x = ds.X.copy()
            x[:, other, :] = ds.X[:, perm, :]
            y = datagen.label_tsim(x, ds.gen_params["support"], ds.gen_params["W_label"])
            assert np.array_equal(y, ds.y)

    def test_masked_summary_support_is_exactly_five(self):
        ds = gen_tsim(30, seed=4)
        frames = ds.gen_params["label_frames"]
        summary = np.tanh(ds.X[:, frames, :].mean(axis=1))
        masked = np.zeros_like(summary)
        masked[:, ds.gen_params["support"]] = summary[:, ds.gen_params["support"]]
        nonzero_cols = np.where(np.abs(masked).max(axis=0) > 0)[0]
        assert len(nonzero_cols) == 5
        assert np.array_equal(nonzero_cols, ds.gen_params["support"])

    def test_determinism(self):
        assert np.array_equal(gen_tsim(15, seed=11).X, gen_tsim(15, seed=11).X)


class TestSsim:
    def test_shapes_and_classes(self):
        ds = gen_ssim(60, seed=0)
        assert ds.X.shape == (60, 1, 16)
        assert ds.n_classes == 5

    def test_zeroing_nonsupport_never_changes_labels(self):
        ds = gen_ssim(500, seed=1)
        x = np.zeros_like(ds.X)
        x[:, :, ds.gen_params["support"]] = ds.X[:, :, ds.gen_params["support"]]
        y = np.argmax(x[:, 0, :] @ ds.gen_params["W_label"].T, axis=1)
        assert np.array_equal(y, ds.y)

    def test_label_purity_random_nonsupport_perturbations(self):
        ds = gen_ssim(50, seed=6)
        support = set(ds.gen_params["support"].tolist())
        other = [j for j in range(16) if j not in support]
        rng = np.random.default_rng(2)
        for _ in range(1000):
            x = ds.X.copy()
            j = other[rng.integers(len(other))]
            x[:, 0, j] += rng.normal(size=50)
            y = np.argmax(x[:, 0, :] @ ds.gen_params["W_label"].T, axis=1)
            assert np.array_equal(y, ds.y)

    def test_predictive_proxy_covariance_positive(self):
        ds = gen_ssim(10_000, seed=3)
        x = ds.X[:, 0, :]
        support = ds.gen_params["support"]
        proxies = ds.gen_params["proxies"]
        for j in range(len(support)):
            cov = np.cov(x[:, support[j]], x[:, proxies[j]])[0, 1]
            assert cov > 0

    def test_determinism(self):
        assert np.array_equal(gen_ssim(25, seed=13).X, gen_ssim(25, seed=13).X)


class TestSplit:
    def test_exact_counts(self):
        ds = gen_ssim(6500, seed=0)
        tr, pf, te = split(ds, SplitSpec(3000, 500, 3000), seed=1)
        assert (tr.n, pf.n, te.n) == (3000, 500, 3000)

    def test_partition_disjoint_and_exhaustive(self):
        ds = gen_ssim(120, seed=0)
        tr, pf, te = split(ds, SplitSpec(60, 20, 40), seed=5)
        rows = np.concatenate([tr.X, pf.X, te.X]).reshape(120, -1)
        all_rows = {tuple(r) for r in rows}
        orig = {tuple(r) for r in ds.X.reshape(120, -1)}
        assert all_rows == orig and len(rows) == 120

    def test_fractions_for_external(self):
        ds = Dataset(np.random.randn(100, 1, 3), np.zeros(100, dtype=np.int64),
                     "external", 1)
        tr, pf, te = split(ds, SplitSpec(0.6, 0.1, 0.3), seed=2)
        assert (tr.n, pf.n, te.n) == (60, 10, 30)

    def test_same_seed_identical(self):
        ds = gen_ssim(50, seed=0)
        a = split(ds, SplitSpec(20, 10, 20), seed=9)
        b = split(ds, SplitSpec(20, 10, 20), seed=9)
        assert all(np.array_equal(x.X, y.X) for x, y in zip(a, b))

    def test_oversubscription_raises(self):
        ds = gen_ssim(10, seed=0)
        with pytest.raises(datagen.ConfigError):
            split(ds, SplitSpec(8, 2, 5), seed=0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10**6))
    def test_partition_property(self, seed):
        ds = gen_ssim(40, seed=0)
        tr, pf, te = split(ds, SplitSpec(15, 5, 10), seed=seed)
        idx = []
        for part in (tr, pf, te):
            for row in part.X.reshape(part.n, -1):
                matches = np.where((ds.X.reshape(40, -1) == row).all(axis=1))[0]
                assert len(matches) == 1
                idx.append(matches[0])
        assert len(set(idx)) == 30


class TestOracleSampler:
    def test_fully_observed_returns_input(self):
        ds = gen_ssim(5, seed=0)
        x = ds.X[0]
        out = oracle_conditional_sample(ds, x, np.ones_like(x), 7, Rng(0))
        assert np.array_equal(out.draws, np.repeat(x[None], 7, axis=0))
        assert not out.flagged

    def test_observed_coords_copied_verbatim(self):
        ds = gen_ssim(5, seed=1)
        x = ds.X[0]
        mask = np.zeros_like(x)
        mask[0, ::2] = 1.0
        out = oracle_conditional_sample(ds, x, mask, 20, Rng(3))
        assert np.array_equal(out.draws[:, 0, ::2],
                              np.repeat(x[None, 0, ::2], 20, axis=0))

    def test_unconditional_moments_match_direct_sampling(self):
        # all-zero mask: oracle draws are unconditional; compare their mean to
        # the mean of fresh direct samples, both estimated empirically
        ds = gen_ssim(4, seed=2)
        big = gen_ssim(100_000, seed=99)
        direct_mean = big.X[:, 0, :].mean(axis=0)
        direct_se = big.X[:, 0, :].std(axis=0) / np.sqrt(big.n)
        x = ds.X[0]
        out = oracle_conditional_sample(ds, x, np.zeros_like(x), 10_000, Rng(4))
        draw_mean = out.draws[:, 0, :].mean(axis=0)
        draw_se = out.draws[:, 0, :].std(axis=0) / np.sqrt(10_000)
        se = np.sqrt(direct_se ** 2 + draw_se ** 2)
        assert np.all(np.abs(draw_mean - direct_mean) < 3.5 * se)

    def test_linear_case_matches_gaussian_conditioning_oracle(self):
        # alpha=0 makes the static process jointly Gaussian, so the exact
        # conditional mean is available in closed form
        ds = gen_ssim(50, seed=5, alpha=0.0)
        lam = ds.gen_params["loadings"]
        mu = ds.gen_params["intercept"]
        sigma = ds.gen_params["sigma"]
        cov = lam @ lam.T + sigma ** 2 * np.eye(ds.d)
        x = ds.X[0, 0]
        obs = np.zeros(ds.d, dtype=bool)
        obs[ds.gen_params["support"]] = True
        obs[ds.gen_params["proxies"][:2]] = True
        miss = ~obs
        cond_mean = mu[miss] + cov[np.ix_(miss, obs)] @ np.linalg.solve(
            cov[np.ix_(obs, obs)], x[obs] - mu[obs])

        mask = np.zeros((1, ds.d))
        mask[0, obs] = 1.0
        means = []
        for rep in range(24):
            out = oracle_conditional_sample(ds, ds.X[0], mask, 500, Rng(100 + rep))
            means.append(out.draws[:, 0, miss].mean(axis=0))
        means = np.stack(means)
        grand = means.mean(axis=0)
        se = means.std(axis=0, ddof=1) / np.sqrt(len(means))
        assert np.all(np.abs(grand - cond_mean) < 4 * se + 1e-9)

    def test_external_rejected(self):
        ds = Dataset(np.zeros((3, 1, 2)), np.zeros(3, dtype=np.int64), "external", 1)
        with pytest.raises(datagen.UnsupportedError):
            oracle_conditional_sample(ds, ds.X[0], np.ones((1, 2)), 2, Rng(0))

    def test_ess_reported(self):
        ds = gen_tsim_rc(5, seed=0)
        x = ds.X[0]
        mask = np.zeros_like(x)
        mask[:4, :] = 1.0
        out = oracle_conditional_sample(ds, x, mask, 10, Rng(1))
        assert out.ess > 0
        assert isinstance(out.flagged, bool)

    def test_tsim_rc_draws_respect_dynamics_scale(self):
        ds = gen_tsim_rc(5, seed=0)
        x = ds.X[0]
        mask = np.zeros_like(x)
        mask[:8, :] = 1.0
        out = oracle_conditional_sample(ds, x, mask, 50, Rng(2))
        assert np.all(np.isfinite(out.draws))
        assert np.array_equal(out.draws[:, :8, :], np.repeat(x[None, :8, :], 50, axis=0))
