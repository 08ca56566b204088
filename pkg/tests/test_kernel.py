"""Unit tests for the regression kernel: WLS, absorption, clustering, 2SLS."""

import numpy as np
import pytest

from creditscan.errors import (
    ConvergenceError,
    RankDeficientError,
    TooFewClustersError,
    UnderidentifiedError,
)
from creditscan.kernel import (
    ClusterSpec,
    DesignMatrix,
    GroupLabels,
    absorb_fixed_effects,
    absorbed_dof,
    cluster_robust_vcov,
    difference_test,
    tsls_fit,
    wald_test,
    with_cluster_vcov,
    wls_fit,
)


def _random_design(rng, n=200, k=3, weighted=True):
    values = np.column_stack([np.ones(n), rng.normal(size=(n, k - 1))])
    weights = rng.uniform(0.5, 3.0, n) if weighted else np.ones(n)
    names = tuple(["const"] + [f"x{i}" for i in range(1, k)])
    return DesignMatrix(names, values, weights)


class TestDesignMatrix:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            DesignMatrix(("x",), np.array([[1.0], [np.nan]]), np.ones(2))

    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError):
            DesignMatrix(("x",), np.ones((2, 1)), np.array([1.0, -1.0]))

    def test_rejects_all_zero_weights(self):
        with pytest.raises(ValueError):
            DesignMatrix(("x",), np.ones((2, 1)), np.zeros(2))

    def test_from_columns_preserves_order(self):
        dm = DesignMatrix.from_columns({"b": [1.0, 2.0], "a": [3.0, 4.0]})
        assert dm.names == ("b", "a")
        np.testing.assert_array_equal(dm.values[:, 0], [1.0, 2.0])


class TestGroupLabels:
    def test_factorizes_strings(self):
        g = GroupLabels.from_arrays(county=np.array(["b", "a", "b"]))
        assert g.sizes == (2,)
        assert g.codes[0].tolist() == [1, 0, 1]

    def test_rejects_nan_labels(self):
        with pytest.raises(ValueError, match="unlabeled"):
            GroupLabels.from_arrays(g=np.array([1.0, np.nan]))

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            GroupLabels.from_arrays(a=np.array([1, 2]), b=np.array([1, 2, 3]))


class TestWlsFit:
    def test_weighted_mean_oracle(self):
        # intercept-only WLS is the weighted mean: (1+2+3+3*5)/6 = 3.5
        X = DesignMatrix(("const",), np.ones((4, 1)), np.array([1.0, 1.0, 1.0, 3.0]))
        res = wls_fit(X, np.array([1.0, 2.0, 3.0, 5.0]))
        assert res.params[0] == pytest.approx(3.5, abs=1e-12)

    def test_matches_lstsq_unweighted(self):
        rng = np.random.default_rng(11)
        X = _random_design(rng, weighted=False)
        y = rng.normal(size=X.n_rows)
        res = wls_fit(X, y)
        expected, *_ = np.linalg.lstsq(X.values, y, rcond=None)
        np.testing.assert_allclose(res.params, expected, atol=1e-10)

    def test_matches_normal_equations_weighted(self):
        rng = np.random.default_rng(12)
        X = _random_design(rng)
        y = rng.normal(size=X.n_rows)
        res = wls_fit(X, y)
        W = np.diag(X.weights)
        expected = np.linalg.solve(X.values.T @ W @ X.values, X.values.T @ W @ y)
        np.testing.assert_allclose(res.params, expected, atol=1e-10)

    def test_hc1_matches_direct_formula(self):
        rng = np.random.default_rng(13)
        X = _random_design(rng)
        y = rng.normal(size=X.n_rows)
        res = wls_fit(X, y)
        W = np.diag(X.weights)
        bread = np.linalg.inv(X.values.T @ W @ X.values)
        e = y - X.values @ res.params
        scores = X.values * (X.weights * e)[:, None]
        n, k = X.n_rows, X.n_columns
        direct = n / (n - k) * bread @ (scores.T @ scores) @ bread
        np.testing.assert_allclose(res.vcov, direct, rtol=1e-8)

    def test_zero_weight_rows_ignored(self):
        rng = np.random.default_rng(14)
        X = _random_design(rng, n=100)
        y = rng.normal(size=100)
        w = X.weights.copy()
        w[:30] = 0.0
        res_zero = wls_fit(DesignMatrix(X.names, X.values, w), y)
        res_sub = wls_fit(DesignMatrix(X.names, X.values[30:], w[30:]), y[30:])
        np.testing.assert_allclose(res_zero.params, res_sub.params, atol=1e-12)
        np.testing.assert_allclose(res_zero.se, res_sub.se, atol=1e-12)
        assert res_zero.n_obs == 70

    def test_weight_scaling_invariance(self):
        rng = np.random.default_rng(15)
        X = _random_design(rng)
        y = rng.normal(size=X.n_rows)
        base = wls_fit(X, y)
        scaled = wls_fit(DesignMatrix(X.names, X.values, 7.3 * X.weights), y)
        np.testing.assert_allclose(base.params, scaled.params, atol=1e-10)
        np.testing.assert_allclose(base.se, scaled.se, rtol=1e-9)
        assert base.r_squared == pytest.approx(scaled.r_squared, abs=1e-12)

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(16)
        X = _random_design(rng)
        y = rng.normal(size=X.n_rows)
        perm = rng.permutation(X.n_rows)
        base = wls_fit(X, y)
        shuffled = wls_fit(DesignMatrix(X.names, X.values[perm], X.weights[perm]), y[perm])
        np.testing.assert_allclose(base.params, shuffled.params, atol=1e-10)
        np.testing.assert_allclose(base.vcov, shuffled.vcov, rtol=1e-8)

    def test_vcov_is_psd(self):
        rng = np.random.default_rng(17)
        for seed in range(10):
            local = np.random.default_rng(seed)
            X = _random_design(local, n=80, k=4)
            y = local.normal(size=80)
            res = wls_fit(X, y)
            eigs = np.linalg.eigvalsh(res.vcov)
            assert eigs.min() >= -1e-12

    def test_collinear_raise_names_columns(self):
        x = np.random.default_rng(18).normal(size=(50, 1))
        X = DesignMatrix(("a", "b"), np.column_stack([x, 2.0 * x]), np.ones(50))
        with pytest.raises(RankDeficientError) as excinfo:
            wls_fit(X, x[:, 0])
        assert set(excinfo.value.columns) & {"a", "b"}

    def test_collinear_drop_keeps_rest(self):
        rng = np.random.default_rng(19)
        x = rng.normal(size=(60, 2))
        X = DesignMatrix(
            ("const", "x1", "dup"),
            np.column_stack([np.ones(60), x[:, 0], x[:, 0]]),
            np.ones(60),
        )
        y = 1.0 + 2.0 * x[:, 0] + rng.normal(size=60) * 0.1
        res = wls_fit(X, y, on_collinear="drop")
        assert len(res.names) == 2
        assert "dropped_columns" in res.diagnostics

    def test_r_squared_centered_for_intercept(self):
        rng = np.random.default_rng(20)
        X = _random_design(rng, n=500)
        y = X.values @ np.array([1.0, 0.5, -0.5]) + rng.normal(size=500) * 0.01
        res = wls_fit(X, y)
        assert 0.99 < res.r_squared <= 1.0
        # a pure-noise outcome has near-zero centered R2 even with an intercept
        noise = wls_fit(X, rng.normal(size=500) + 10.0)
        assert noise.r_squared < 0.1

    def test_json_dict_shape(self):
        rng = np.random.default_rng(21)
        X = _random_design(rng, n=40)
        res = wls_fit(X, rng.normal(size=40))
        d = res.to_json_dict()
        assert sorted(d) == ["coefficients", "n_clusters", "n_obs", "r2", "se", "vcov"]
        assert list(d["coefficients"]) == list(X.names)
        assert len(d["vcov"]) == len(X.names)


class TestAbsorption:
    def test_one_way_demeaning_oracle(self):
        # groups {1,3} and {5,9}: demeaned y is [-1, 1, -2, 2]
        X = DesignMatrix(("x",), np.array([[1.0], [2.0], [3.0], [4.0]]), np.ones(4))
        g = GroupLabels.from_arrays(grp=np.array([0, 0, 1, 1]))
        _, yd, dof = absorb_fixed_effects(X, np.array([1.0, 3.0, 5.0, 9.0]), g)
        np.testing.assert_allclose(yd, [-1.0, 1.0, -2.0, 2.0], atol=1e-12)
        assert dof == 2

    def test_weighted_demeaning_uses_weighted_means(self):
        X = DesignMatrix(("x",), np.zeros((3, 1)), np.array([1.0, 3.0, 2.0]))
        g = GroupLabels.from_arrays(grp=np.array([0, 0, 0]))
        _, yd, _ = absorb_fixed_effects(X, np.array([2.0, 6.0, 1.0]), g)
        wmean = (2.0 + 18.0 + 2.0) / 6.0
        np.testing.assert_allclose(yd, np.array([2.0, 6.0, 1.0]) - wmean, atol=1e-12)

    @pytest.mark.parametrize("seed", range(8))
    def test_two_way_matches_explicit_dummies(self, seed):
        rng = np.random.default_rng(seed)
        n = 300
        f1 = rng.integers(0, 7, n)
        f2 = rng.integers(0, 4, n)
        x = rng.normal(size=(n, 2))
        w = rng.uniform(0.5, 2.0, n)
        y = x @ np.array([1.5, -0.7]) + 0.8 * f1 - 1.1 * f2 + rng.normal(size=n)

        dummies = np.column_stack([np.eye(7)[f1], np.eye(4)[f2][:, 1:]])
        full = DesignMatrix(
            tuple(f"c{i}" for i in range(2 + 7 + 3)),
            np.column_stack([x, dummies]),
            w,
        )
        explicit = wls_fit(full, y, vcov="classical")

        slim = DesignMatrix(("x0", "x1"), x, w)
        g = GroupLabels.from_arrays(f1=f1, f2=f2)
        xd, yd, dof = absorb_fixed_effects(slim, y, g)
        within = wls_fit(xd, yd, vcov="classical", extra_dof=dof, center_tss=True)

        np.testing.assert_allclose(within.params, explicit.params[:2], atol=1e-8)
        np.testing.assert_allclose(within.se, explicit.se[:2], rtol=1e-6)

    def test_absorbed_dof_connected(self):
        g = GroupLabels.from_arrays(
            a=np.array([0, 0, 1, 1, 2]), b=np.array([0, 1, 1, 2, 2])
        )
        assert absorbed_dof(g) == 3 + 3 - 1

    def test_absorbed_dof_disconnected(self):
        # two blocks that never mix: one redundant dummy per block
        g = GroupLabels.from_arrays(
            a=np.array([0, 0, 1, 1]), b=np.array([0, 0, 1, 1])
        )
        assert absorbed_dof(g) == 2 + 2 - 2

    def test_convergence_error_reports_residual(self):
        rng = np.random.default_rng(3)
        n = 200
        g = GroupLabels.from_arrays(
            f1=rng.integers(0, 20, n), f2=rng.integers(0, 20, n)
        )
        X = DesignMatrix(("x",), rng.normal(size=(n, 1)), np.ones(n))
        with pytest.raises(ConvergenceError) as excinfo:
            absorb_fixed_effects(X, rng.normal(size=n), g, max_iter=1)
        assert excinfo.value.residual > excinfo.value.tol

    def test_group_constant_column_absorbed_to_zero(self):
        rng = np.random.default_rng(4)
        f = rng.integers(0, 5, 100)
        col = f.astype(float) * 2.0 + 1.0
        X = DesignMatrix(("gc",), col[:, None], np.ones(100))
        g = GroupLabels.from_arrays(f=f)
        xd, _, _ = absorb_fixed_effects(X, rng.normal(size=100), g)
        assert np.max(np.abs(xd.values)) < 1e-8


class TestClusterRobust:
    def _fit(self, seed=30, n=120):
        rng = np.random.default_rng(seed)
        X = _random_design(rng, n=n)
        y = rng.normal(size=n)
        return X, y, wls_fit(X, y)

    def test_hand_computed_two_cluster_sandwich(self):
        X = DesignMatrix(("const",), np.ones((4, 1)), np.ones(4))
        y = np.array([1.0, 3.0, 2.0, 6.0])
        res = wls_fit(X, y)
        labels = np.array([0, 0, 1, 1])
        cov = cluster_robust_vcov(res, labels)
        e = y - 3.0
        s0 = e[0] + e[1]
        s1 = e[2] + e[3]
        bread = 1.0 / 4.0
        scale = (2.0 / 1.0) * (3.0 / 3.0)
        expected = scale * bread * (s0 * s0 + s1 * s1) * bread
        assert cov[0, 0] == pytest.approx(expected, rel=1e-12)

    def test_singleton_clusters_equal_hc1(self):
        X, y, res = self._fit()
        cov = cluster_robust_vcov(res, np.arange(X.n_rows))
        np.testing.assert_allclose(cov, res.vcov, rtol=1e-10)

    def test_cluster_label_permutation_invariance(self):
        X, y, res = self._fit(seed=31)
        labels = np.random.default_rng(0).integers(0, 10, X.n_rows)
        a = cluster_robust_vcov(res, labels)
        b = cluster_robust_vcov(res, 1000 - labels)
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_accepts_cluster_spec(self):
        X, y, res = self._fit(seed=32)
        labels = np.repeat(np.arange(6), X.n_rows // 6)
        direct = cluster_robust_vcov(res, labels)
        via_spec = cluster_robust_vcov(res, ClusterSpec(labels))
        np.testing.assert_array_equal(direct, via_spec)

    def test_with_cluster_vcov_updates_inference_dof(self):
        X, y, res = self._fit(seed=33)
        labels = np.repeat(np.arange(8), X.n_rows // 8)
        out = with_cluster_vcov(res, labels)
        assert out.n_clusters == 8
        assert out.dof_inference == 7
        assert out.vcov_type == "CR1"
        np.testing.assert_allclose(out.se, np.sqrt(np.diag(out.vcov)), atol=1e-14)

    def test_single_cluster_raises(self):
        X, y, res = self._fit(seed=34)
        with pytest.raises(TooFewClustersError):
            cluster_robust_vcov(res, np.zeros(X.n_rows, dtype=int))

    def test_cr1_psd(self):
        for seed in range(6):
            X, y, res = self._fit(seed=40 + seed)
            labels = np.random.default_rng(seed).integers(0, 12, X.n_rows)
            cov = cluster_robust_vcov(res, labels)
            assert np.linalg.eigvalsh(cov).min() >= -1e-12


class TestTsls:
    def test_wald_ratio_closed_form(self):
        rng = np.random.default_rng(50)
        n = 400
        z = rng.normal(size=n)
        x = 0.9 * z + rng.normal(size=n)
        y = 2.0 * x + rng.normal(size=n)
        const = DesignMatrix(("const",), np.ones((n, 1)), np.ones(n))
        res = tsls_fit(y, const, {"x": x}, {"z": z})
        ratio = np.cov(z, y, bias=True)[0, 1] / np.cov(z, x, bias=True)[0, 1]
        assert res["x"] == pytest.approx(ratio, rel=1e-10)

    def test_self_instrument_equals_ols(self):
        rng = np.random.default_rng(51)
        n = 250
        x = rng.normal(size=n)
        y = 1.0 + 0.5 * x + rng.normal(size=n)
        const = DesignMatrix(("const",), np.ones((n, 1)), np.ones(n))
        iv = tsls_fit(y, const, {"x": x}, {"x_inst": x})
        ols = wls_fit(DesignMatrix(("const", "x"), np.column_stack([np.ones(n), x]), np.ones(n)), y)
        np.testing.assert_allclose(iv.params, ols.params, atol=1e-10)

    def test_underidentified_raises(self):
        rng = np.random.default_rng(52)
        n = 100
        const = DesignMatrix(("const",), np.ones((n, 1)), np.ones(n))
        with pytest.raises(UnderidentifiedError):
            tsls_fit(
                rng.normal(size=n),
                const,
                {"x1": rng.normal(size=n), "x2": rng.normal(size=n)},
                {"z": rng.normal(size=n)},
            )

    def test_first_stage_f_reported(self):
        rng = np.random.default_rng(53)
        n = 500
        z = rng.normal(size=n)
        x = 1.5 * z + rng.normal(size=n)
        y = x + rng.normal(size=n)
        const = DesignMatrix(("const",), np.ones((n, 1)), np.ones(n))
        res = tsls_fit(y, const, {"x": x}, {"z": z})
        assert res.diagnostics["first_stage_F"]["x"] > 100.0

    def test_clustered_tsls_keeps_diagnostics(self):
        rng = np.random.default_rng(54)
        n = 300
        z = rng.normal(size=n)
        x = z + rng.normal(size=n)
        y = x + rng.normal(size=n)
        const = DesignMatrix(("const",), np.ones((n, 1)), np.ones(n))
        labels = rng.integers(0, 15, n)
        res = tsls_fit(y, const, {"x": x}, {"z": z}, clusters=labels)
        assert res.vcov_type == "CR1"
        assert res.n_clusters == 15
        assert "first_stage_F" in res.diagnostics

    def test_weights_flow_through(self):
        rng = np.random.default_rng(55)
        n = 300
        z = rng.normal(size=n)
        x = z + rng.normal(size=n)
        y = 2.0 * x + rng.normal(size=n)
        w = rng.uniform(0.5, 4.0, n)
        const_w = DesignMatrix(("const",), np.ones((n, 1)), w)
        res_w = tsls_fit(y, const_w, {"x": x}, {"z": z})
        # replicate rows in proportion to integer weights
        wi = np.round(w * 2).astype(int)
        idx = np.repeat(np.arange(n), wi)
        const_r = DesignMatrix(("const",), np.ones((idx.size, 1)), np.ones(idx.size))
        res_r = tsls_fit(y[idx], const_r, {"x": x[idx]}, {"z": z[idx]})
        w_match = DesignMatrix(("const",), np.ones((n, 1)), wi.astype(float))
        res_m = tsls_fit(y, w_match, {"x": x}, {"z": z})
        np.testing.assert_allclose(res_m.params, res_r.params, atol=1e-10)
        assert abs(res_w["x"] - res_m["x"]) < 0.05


class TestWald:
    def test_single_restriction_equals_t_squared(self):
        rng = np.random.default_rng(60)
        X = _random_design(rng, n=150)
        res = wls_fit(X, rng.normal(size=150))
        f, p, q = wald_test(res, "x1")
        t = res.params[1] / res.se[1]
        assert q == 1
        assert f == pytest.approx(t * t, rel=1e-10)

    def test_difference_test_symmetric(self):
        rng = np.random.default_rng(61)
        X = _random_design(rng, n=150)
        res = wls_fit(X, rng.normal(size=150))
        f_ab, p_ab, _ = difference_test(res, "x1", "x2")
        f_ba, p_ba, _ = difference_test(res, "x2", "x1")
        assert f_ab == pytest.approx(f_ba, rel=1e-12)
        assert p_ab == pytest.approx(p_ba, rel=1e-12)

    def test_joint_restriction_dof(self):
        rng = np.random.default_rng(62)
        X = _random_design(rng, n=150, k=4)
        res = wls_fit(X, rng.normal(size=150))
        _, _, q = wald_test(res, ["x1", "x2", "x3"])
        assert q == 3
