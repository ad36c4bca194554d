import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdrkit.datagen import LinearModelSpec, generate_linear_model
from sdrkit.lindr import (
    ConvergenceError,
    ProjectionBasis,
    RccaConfig,
    UndersampledError,
    _nipals,
    _standardize,
    cca_fit,
    fit,
    pca_fit,
    pls_fit,
    project,
    rcca_fit,
)
from sdrkit.metrics import rc_prime


def _abs_cos(a, b):
    return np.abs(np.sum(a * b, axis=0)) / (np.linalg.norm(a, axis=0) * np.linalg.norm(b, axis=0))


def _distinct_pair(t=3000, n=200, seed=0):
    """Three shared latents with well separated canonical correlations."""
    rng = np.random.default_rng(seed)
    rho = np.array([0.9, 0.7, 0.5])
    s = rng.standard_normal((t, 3))
    s2 = rho * s + np.sqrt(1 - rho**2) * rng.standard_normal((t, 3))
    x = s @ rng.standard_normal((3, n)) + rng.standard_normal((t, n))
    y = s2 @ rng.standard_normal((3, n)) + rng.standard_normal((t, n))
    return x, y


class TestPca:
    def test_dominant_axis(self):
        rng = np.random.default_rng(0)
        t = np.linspace(-1, 1, 20_000)
        # Inputs are re-standardised, so the dominant axis is a pair of near-copies.
        x = np.column_stack([t, t + 0.01 * rng.standard_normal(t.size), rng.standard_normal(t.size)])
        w = pca_fit(x, 1).w_x[:, 0]
        assert abs(w @ np.array([1, 1, 0]) / np.sqrt(2)) >= 0.999

    def test_matches_eigendecomposition(self):
        x = np.random.default_rng(1).standard_normal((50, 8))
        basis = pca_fit(x, 8)
        xs = _standardize(x)
        vals, vecs = np.linalg.eigh(xs.T @ xs / 50)
        order = np.argsort(vals)[::-1]
        np.testing.assert_allclose(basis.criteria, vals[order], atol=1e-10)
        np.testing.assert_allclose(_abs_cos(basis.w_x, vecs[:, order]), 1, atol=1e-6)

    def test_train_projection_reproduces_scores(self):
        x = np.random.default_rng(2).standard_normal((60, 5))
        xs = _standardize(x)
        basis = pca_fit(x, 3)
        z = project(basis, xs)
        np.testing.assert_allclose(z.var(axis=0), basis.criteria, rtol=1e-10)

    def test_sign_convention(self):
        x = np.random.default_rng(3).standard_normal((40, 6))
        for basis in (pca_fit(x, 4), pca_fit(-x, 4)):
            w = basis.w_x
            idx = np.argmax(np.abs(w), axis=0)
            assert np.all(w[idx, np.arange(4)] > 0)
        np.testing.assert_allclose(pca_fit(x, 4).w_x, pca_fit(-x, 4).w_x, atol=1e-10)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            pca_fit(np.ones((5, 3)) + np.eye(5, 3), 4)


class TestPls:
    def test_matches_svd_oracle(self):
        x, y = _distinct_pair(t=500, n=30)
        basis = pls_fit(x, y, 3, RccaConfig(nipals_tolerance=1e-10))
        u, s, vt = np.linalg.svd(_standardize(x).T @ _standardize(y) / 500)
        np.testing.assert_allclose(basis.criteria, s[:3], rtol=1e-8)
        np.testing.assert_allclose(_abs_cos(basis.w_x, u[:, :3]), 1, atol=1e-6)
        np.testing.assert_allclose(_abs_cos(basis.w_y, vt[:3].T), 1, atol=1e-6)

    def test_identical_views_follow_pca(self):
        x = np.random.default_rng(4).standard_normal((200, 6)) @ np.diag([3, 2, 1, 1, 1, 1.0])
        x[:, 1] += x[:, 0]
        basis = pls_fit(x, x, 1, RccaConfig(nipals_tolerance=1e-10))
        pca = pca_fit(x, 1)
        assert basis.criteria[0] == pytest.approx(pca.criteria[0], rel=1e-8)
        assert _abs_cos(basis.w_x, pca.w_x)[0] == pytest.approx(1, abs=1e-8)

    def test_planted_direction_recovered(self):
        spec = LinearModelSpec.from_snr(200, 200, 3000, 1, 0, 5.0, 0.0, seed_samples=1)
        pair = generate_linear_model(spec)
        basis = pls_fit(pair.x, pair.y, 1)
        # Regress the shared latent onto X to get the planted X direction.
        planted = np.linalg.lstsq(pair.shared, pair.x, rcond=None)[0][0]
        assert _abs_cos(basis.w_x[:, 0], planted) >= 0.95

    def test_null_below_signal(self):
        rng = np.random.default_rng(5)
        x, y = rng.standard_normal((2000, 20)), rng.standard_normal((2000, 20))
        null = pls_fit(x, y, 1).criteria[0]
        shuffled = [pls_fit(x, y[rng.permutation(2000)], 1).criteria[0] for _ in range(20)]
        assert null < 2 * max(shuffled)
        spec = LinearModelSpec.from_snr(20, 20, 2000, 1, 0, 5.0, 0.0)
        pair = generate_linear_model(spec)
        assert pls_fit(pair.x, pair.y, 1).criteria[0] > 5 * max(shuffled)

    def test_convergence_error_carries_budget(self):
        # Two equal singular values make the iterate rotate slowly from this start.
        m = np.array([[1.0, 0.0], [0.0, 1.0 - 1e-9]])
        rot = np.array([[np.cos(0.3), -np.sin(0.3)], [np.sin(0.3), np.cos(0.3)]])
        with pytest.raises(ConvergenceError) as info:
            _nipals(m @ rot, 1, 1e-14, 3)
        assert info.value.iterations == 3

    def test_deflation_exhausts_rank(self):
        x, y = _distinct_pair(t=300, n=4)
        basis = pls_fit(x, y, 4, RccaConfig(nipals_tolerance=1e-10))
        m = _standardize(x).T @ _standardize(y) / 300
        resid = m - basis.w_x @ np.diag(basis.criteria) @ basis.w_y.T
        assert np.linalg.norm(resid, 2) < 1e-8 * basis.criteria[0]


class TestCca:
    def test_identical_views(self):
        x = np.random.default_rng(6).standard_normal((100, 5))
        np.testing.assert_allclose(cca_fit(x, x, 5).criteria, 1, atol=1e-6)

    def test_undersampled_is_refused(self):
        rng = np.random.default_rng(7)
        with pytest.raises(UndersampledError):
            cca_fit(rng.standard_normal((20, 30)), rng.standard_normal((20, 5)), 2)

    def test_null_scale(self):
        rng = np.random.default_rng(8)
        x, y = rng.standard_normal((200, 20)), rng.standard_normal((200, 20))
        top = cca_fit(x, y, 1).criteria[0]
        shuffled = [cca_fit(x, y[rng.permutation(200)], 1).criteria[0] for _ in range(10)]
        assert abs(top - np.mean(shuffled)) < 4 * np.std(shuffled) + 0.05
        assert top < 3 * np.sqrt(20 / 200) + 0.2

    def test_planted_recovery(self):
        spec = LinearModelSpec.from_snr(1000, 1000, 3000, 1, 0, 5.0, 0.0, seed_samples=1)
        train = generate_linear_model(spec)
        test = generate_linear_model(LinearModelSpec(**{**spec.__dict__, "seed_samples": 2}))
        zx, zy = project(cca_fit(train.x, train.y, 1), test.x, test.y)
        assert rc_prime(zx, zy, 1).rc_prime >= 0.9


class TestRcca:
    def test_c_one_equals_pls(self):
        x, y = _distinct_pair(t=400, n=40)
        r = rcca_fit(x, y, 3, RccaConfig(1.0, 1.0))
        p = pls_fit(x, y, 3)
        np.testing.assert_allclose(r.w_x, p.w_x, atol=1e-6)
        np.testing.assert_allclose(r.w_y, p.w_y, atol=1e-6)

    def test_c_zero_equals_cca(self):
        x, y = _distinct_pair()
        r = rcca_fit(x, y, 3, RccaConfig(0.0, 0.0))
        c = cca_fit(x, y, 3)
        np.testing.assert_allclose(r.criteria, c.criteria, atol=1e-6)
        assert np.all(1 - _abs_cos(r.w_x, c.w_x) < 1e-5)
        assert np.all(1 - _abs_cos(r.w_y, c.w_y) < 1e-5)

    def test_undersampled_recovery(self):
        spec = LinearModelSpec.from_snr(1000, 1000, 300, 1, 1, 5.0, 5.0, seed_samples=1)
        train = generate_linear_model(spec)
        test = generate_linear_model(LinearModelSpec(**{**spec.__dict__, "seed_samples": 2}))
        zx, zy = project(rcca_fit(train.x, train.y, 1), test.x, test.y)
        assert rc_prime(zx, zy, 1).rc_prime >= 0.85

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RccaConfig(c_x=1.5)
        with pytest.raises(ValueError):
            RccaConfig(nipals_tolerance=0)

    def test_truncate_matches_refit(self):
        x, y = _distinct_pair(t=300, n=20)
        full = rcca_fit(x, y, 5)
        np.testing.assert_array_equal(full.truncate(2).w_x, rcca_fit(x, y, 2).w_x)

    @settings(max_examples=15, deadline=None)
    @given(scale=st.floats(0.01, 100), method=st.sampled_from(["pca", "pls", "cca", "rcca"]))
    def test_scale_equivariance(self, scale, method):
        x, y = _distinct_pair(t=200, n=8, seed=3)
        a = fit(method, x, y, 2)
        b = fit(method, scale * x, scale * y, 2)
        np.testing.assert_allclose(a.w_x, b.w_x, atol=1e-6)

    def test_deterministic(self):
        x, y = _distinct_pair(t=200, n=10)
        a, b = rcca_fit(x, y, 3), rcca_fit(x, y, 3)
        assert np.array_equal(a.w_x, b.w_x) and a.iterations == b.iterations


class TestProject:
    def test_identity_basis(self):
        x = np.random.default_rng(9).standard_normal((10, 3))
        basis = ProjectionBasis("pca", np.eye(3), np.eye(3), np.ones(3))
        zx, zy = project(basis, x, 2 * x)
        np.testing.assert_array_equal(zx, x)
        np.testing.assert_array_equal(zy, 2 * x)
        np.testing.assert_array_equal(project(basis, np.zeros((4, 3))), 0)

    def test_shape_mismatch(self):
        basis = ProjectionBasis("pca", np.eye(3), None, np.ones(3))
        with pytest.raises(ValueError, match="columns"):
            project(basis, np.zeros((2, 4)))
        with pytest.raises(ValueError, match="no Y"):
            project(basis, np.zeros((2, 3)), np.zeros((2, 3)))

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="unknown method"):
            fit("ica", np.zeros((3, 2)), np.zeros((3, 2)), 1)
