"""Data-generating designs and the replication driver."""

import numpy as np
import pytest

from factorgof import (
    NotConvergedError,
    Study1Config,
    Study2Config,
    generate_study1,
    generate_study2,
    run_rejection_study,
    simulate_data,
    study1_paramset,
    study2_paramset,
)
from factorgof.simstudy import RejectionTable, mixture_lv_logpdf, study2_dgp


class TestStudy1Design:
    def test_error_variances_complement_communalities(self):
        p = study1_paramset()
        block = [0.7, 0.5, 0.3, 0.7, 0.5, 0.3, 0.7, 0.5, 0.3, 0.7]
        np.testing.assert_allclose(p.theta, block + block, atol=1e-12)
        sigma = p.implied_covariance()
        np.testing.assert_allclose(np.diag(sigma), 1.0, atol=1e-12)

    def test_arms_share_latent_moments(self):
        n = 1_000_000
        _, x_norm = generate_study1(Study1Config(n=n), np.random.default_rng(1), return_lv=True)
        _, x_mix = generate_study1(
            Study1Config(n=n, misspecified=True), np.random.default_rng(2), return_lv=True
        )
        target = np.array([[1.0, 0.2], [0.2, 1.0]])
        for x in (x_norm, x_mix):
            assert np.abs(x.mean(axis=0)).max() < 0.005
            assert np.abs(np.cov(x.T, ddof=1) - target).max() < 0.005

    def test_mixture_covariance_spec_value(self):
        _, x = generate_study1(
            Study1Config(n=200_000, misspecified=True), np.random.default_rng(3),
            return_lv=True,
        )
        np.testing.assert_allclose(
            np.cov(x.T, ddof=1), [[1.0, 0.2], [0.2, 1.0]], atol=0.01
        )

    def test_mixture_vs_normal_density_geometry(self):
        # box-count density estimates at probe points have the analytic sign
        # pattern: the normal exceeds the mixture at the origin, the mixture
        # exceeds the normal on the shoulders of the x1 axis
        n = 1_000_000
        _, x = generate_study1(
            Study1Config(n=n, misspecified=True), np.random.default_rng(4),
            return_lv=True,
        )
        half = 0.15
        probes = np.array([[0.0, 0.0], [1.2, 0.0], [-1.2, 0.0]])
        analytic_mix = np.exp(mixture_lv_logpdf(probes))
        phi = np.array([[1.0, 0.2], [0.2, 1.0]])
        inv = np.linalg.inv(phi)
        analytic_norm = np.array([
            np.exp(-0.5 * pt @ inv @ pt) / (2 * np.pi * np.sqrt(np.linalg.det(phi)))
            for pt in probes
        ])
        for pt, mix_ref, norm_ref in zip(probes, analytic_mix, analytic_norm):
            inside = (np.abs(x - pt) < half).all(axis=1)
            density = inside.mean() / (2 * half) ** 2
            se = np.sqrt(inside.mean() * (1 - inside.mean()) / n) / (2 * half) ** 2
            assert abs(density - mix_ref) < 4 * se
            assert np.sign(density - norm_ref) == np.sign(mix_ref - norm_ref)

    def test_correct_arm_delegates_to_model_simulation(self):
        cfg = Study1Config(n=50)
        a = generate_study1(cfg, np.random.default_rng(9)).values
        b = simulate_data(study1_paramset(), 50, np.random.default_rng(9)).values
        assert np.array_equal(a, b)


class TestStudy2Design:
    def test_dgp_tables(self):
        clean = study2_dgp(Study2Config(n=1))
        assert (clean["kappa"] == 0).all() and (clean["g1"] == 0).all()
        bad = study2_dgp(Study2Config(n=1, misspecified=True))
        assert bad["kappa"][7] == -0.1 and bad["kappa"][9] == -0.1
        assert bad["g1"][8] == 0.3 and bad["g1"][9] == 0.3
        np.testing.assert_allclose(bad["lam"][7:], np.sqrt(0.5))
        np.testing.assert_allclose(bad["g0"], np.log(bad["theta"]))

    def test_quadratic_item_binned_means(self):
        cfg = Study2Config(n=400_000, misspecified=True)
        data, x = generate_study2(cfg, np.random.default_rng(11), return_lv=True)
        y = data.values[:, 7]  # quadratic mean, constant variance
        near0 = np.abs(x) < 0.05
        near2 = np.abs(x - 2.0) < 0.05
        se0 = y[near0].std() / np.sqrt(near0.sum())
        se2 = y[near2].std() / np.sqrt(near2.sum())
        assert abs(y[near0].mean()) < 4 * se0 + 0.01
        expected = 2 * np.sqrt(0.5) - 0.1 * 4.0
        assert abs(y[near2].mean() - expected) < 4 * se2 + 0.01

    def test_logvar_item_binned_variance_ratio(self):
        cfg = Study2Config(n=400_000, misspecified=True)
        data, x = generate_study2(cfg, np.random.default_rng(12), return_lv=True)
        y = data.values[:, 8]  # linear mean, log-linear variance
        hi = np.abs(x - 1.0) < 0.05
        lo = np.abs(x + 1.0) < 0.05
        ratio = y[hi].var(ddof=1) / y[lo].var(ddof=1)
        assert abs(ratio / np.exp(0.6) - 1.0) < 0.15

    def test_correct_arm_delegates_to_model_simulation(self):
        cfg = Study2Config(n=80)
        a = generate_study2(cfg, np.random.default_rng(21)).values
        b = simulate_data(study2_paramset(), 80, np.random.default_rng(21)).values
        assert np.array_equal(a, b)


class TestRejectionStudy:
    def test_band_halfwidth_formula(self):
        table = RejectionTable(
            study="study2", misspecified=False, n=100, alpha=0.05, reps=500,
            converged_reps=500, excluded=0, M=1000, s=1, seed=0,
            grid_label="", summary_label="", batteries={},
        )
        assert table.band_halfwidth == pytest.approx(0.0191, abs=2e-4)

    def test_small_run_counts_and_determinism(self):
        cfg = Study2Config(n=150)
        kwargs = dict(reps=3, seed=99, M=1000, items=(1,), kinds=("linearity",))
        t1 = run_rejection_study(cfg, **kwargs)
        t2 = run_rejection_study(cfg, **kwargs)
        assert t1.converged_reps == 3 and t1.excluded == 0
        (name,) = t1.batteries
        a, b = t1.batteries[name], t2.batteries[name]
        assert np.array_equal(a.point_rejections, b.point_rejections)
        assert np.array_equal(a.point_valid, b.point_valid)
        assert a.summary_rejections == b.summary_rejections
        assert a.summary_valid == b.summary_valid

    def test_baseline_only_mode(self):
        cfg = Study1Config(n=150)
        table = run_rejection_study(
            cfg, reps=2, seed=5, kinds=(), collect_baseline=True
        )
        assert table.batteries == {}
        assert set(table.baseline) == {
            "lr_rate", "mean_cfi", "mean_tli", "mean_srmr", "mean_rmsea"
        }

    def test_raw_collection_shapes(self):
        cfg = Study2Config(n=150)
        table = run_rejection_study(
            cfg, reps=2, seed=7, M=1000, items=(1,), kinds=("variance",),
            collect_raw=True,
        )
        (name,) = table.raw
        assert table.raw[name]["T"].shape == (2,)
        assert table.raw[name]["z"].shape == (2, 31)

    def test_misspecified_arm_srmr_stays_tiny(self):
        # item-level distortions barely move the covariance residuals
        cfg = Study2Config(n=1000, misspecified=True)
        table = run_rejection_study(
            cfg, reps=30, seed=606, kinds=(), collect_baseline=True
        )
        assert abs(table.baseline["mean_srmr"] - 0.01) < 0.01

    def test_all_replications_failing_raises(self):
        cfg = Study2Config(n=150)
        with pytest.raises(NotConvergedError):
            run_rejection_study(cfg, reps=2, seed=1, M=1000, items=(1,), max_iter=1)
