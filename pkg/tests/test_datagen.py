import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdrkit.datagen import (
    DataMatrixPair,
    GaussianPairSpec,
    GenerationError,
    IntegratorError,
    LinearModelSpec,
    PendulumSpec,
    apply_cubic,
    gaussian_mi,
    generate_gaussian_pair,
    generate_linear_model,
    pendulum_energy,
    random_features_embed,
    replicate_embed,
    rho_for_target_mi,
    simulate_pendulum,
    spread_information_pair,
    standardize,
)


def _col_std(a):
    return a.std(axis=0)


class TestLinearModel:
    def test_white_noise_is_uncorrelated(self):
        spec = LinearModelSpec(n_x=20, n_y=20, t=2000)
        pair = generate_linear_model(spec)
        c = pair.x.T @ pair.y / spec.t
        assert np.abs(c).max() < 3 / np.sqrt(spec.t) * 1.5
        np.testing.assert_allclose(_col_std(pair.x), 1, atol=1e-9)
        np.testing.assert_allclose(_col_std(pair.y), 1, atol=1e-9)

    def test_planted_shared_signal_dominates_spectrum(self):
        spec = LinearModelSpec.from_snr(100, 100, 1000, 1, 0, 5.0, 0.0)
        pair = generate_linear_model(spec)
        s = np.linalg.svd(pair.x.T @ pair.y / spec.t, compute_uv=False)
        assert s[0] > 5 * s[1]

    def test_total_variance_matches_decomposition(self):
        spec = LinearModelSpec(n_x=400, n_y=400, t=10_000, m_shared=2, m_self_x=3, m_self_y=1,
                               sigma2_u_x=0.5, sigma2_u_y=2.0, sigma2_p=1.5)
        pair = generate_linear_model(spec, standardized=False)
        for view, data in (("x", pair.x), ("y", pair.y)):
            expected = spec.total_variance(view)
            assert abs(data.var(axis=0).mean() / expected - 1) < 0.05

    def test_snr_definitions(self):
        spec = LinearModelSpec.from_snr(10, 10, 10, 1, 1, 3.0, 0.5)
        assert spec.gamma_shared("x") == pytest.approx(3.0)
        assert spec.gamma_self("y") == pytest.approx(0.5)

    def test_same_seeds_bit_identical(self):
        spec = LinearModelSpec.from_snr(30, 20, 50, 2, 1, 1.0, 1.0, seed_samples=4)
        a, b = generate_linear_model(spec), generate_linear_model(spec)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)

    def test_projections_are_quenched_across_sample_seeds(self):
        base = dict(n_x=30, n_y=30, t=4000, m_shared=1, sigma2_p=5.0, seed_projections=3)
        a = generate_linear_model(LinearModelSpec(**base, seed_samples=1))
        b = generate_linear_model(LinearModelSpec(**base, seed_samples=2))
        u_a = np.linalg.svd(a.x.T @ a.y)[0][:, 0]
        u_b = np.linalg.svd(b.x.T @ b.y)[0][:, 0]
        assert abs(u_a @ u_b) > 0.95
        assert not np.array_equal(a.x, b.x)

    def test_shared_latent_is_returned(self):
        spec = LinearModelSpec.from_snr(10, 10, 40, 3, 0, 1.0, 0.0)
        assert generate_linear_model(spec).shared.shape == (40, 3)

    def test_degenerate_column_is_named(self):
        with pytest.raises(GenerationError, match=r"x\[:, 2\]"):
            standardize(np.array([[1.0, 2.0, 3.0], [2.0, 1.0, 3.0]]), "x")

    def test_negative_variance_rejected(self):
        with pytest.raises(GenerationError):
            LinearModelSpec(n_x=2, n_y=2, t=2, sigma2_p=-1.0)

    def test_no_variance_source_rejected(self):
        with pytest.raises(GenerationError):
            LinearModelSpec(n_x=2, n_y=2, t=2, sigma2_r_x=0.0)


class TestGaussianPairs:
    def test_zero_correlation_has_zero_mi(self):
        assert GaussianPairSpec(4, (0.0,), 10).true_mi == 0.0

    def test_closed_form_mi(self):
        assert gaussian_mi(0.9) == pytest.approx(-0.5 * np.log(0.19))
        assert gaussian_mi(0.9) == pytest.approx(0.8304, abs=1e-4)

    def test_rho_for_target_examples(self):
        np.testing.assert_array_equal(rho_for_target_mi(10, 0.0), np.zeros(10))
        assert rho_for_target_mi(10, 10.0)[0] == pytest.approx(0.9298, abs=1e-4)
        assert rho_for_target_mi(1, 0.8304)[0] == pytest.approx(0.9, abs=1e-4)

    @given(k=st.integers(1, 20), per_component=st.floats(0, 8))
    def test_rho_inverts_mi(self, k, per_component):
        # Beyond ~8 nats per component, 1 - rho**2 loses digits in float64.
        mi = k * per_component
        rho = rho_for_target_mi(k, mi)
        assert gaussian_mi(rho) == pytest.approx(mi, rel=1e-6, abs=1e-12)

    def test_rho_one_rejected(self):
        with pytest.raises(GenerationError):
            GaussianPairSpec(2, (0.5, 1.0), 10)

    def test_componentwise_correlation(self):
        pair = generate_gaussian_pair(GaussianPairSpec(3, (0.2, 0.5, 0.8), 20_000, seed=1))
        c = pair.x.T @ pair.y / pair.t
        np.testing.assert_allclose(np.diag(c), [0.2, 0.5, 0.8], atol=0.02)
        assert np.abs(c - np.diag(np.diag(c))).max() < 0.03

    def test_transforms_preserve_metadata(self):
        pair = generate_gaussian_pair(GaussianPairSpec(2, (0.7,), 500, seed=0))
        for derived in (apply_cubic(pair), replicate_embed(pair, 3),
                        random_features_embed(pair, out_dim=7, hidden=16, seed=0)):
            assert derived.true_mi == pair.true_mi

    def test_cubic_values(self):
        pair = DataMatrixPair(np.zeros((2, 1)), np.array([[0.0], [2.0]]))
        np.testing.assert_array_equal(apply_cubic(pair).y, [[0.0], [8.0]])

    def test_replicate(self):
        pair = generate_gaussian_pair(GaussianPairSpec(10, (0.5,), 200, seed=0))
        assert replicate_embed(pair, 1).x.shape == (200, 10)
        rep = replicate_embed(pair, 10)
        assert rep.x.shape == (200, 100)
        assert np.array_equal(rep.x[:, 13], pair.x[:, 3])
        assert np.linalg.matrix_rank(rep.x.T @ rep.x) == 10

    def test_random_features_deterministic(self):
        pair = generate_gaussian_pair(GaussianPairSpec(4, (0.5,), 300, seed=0))
        a = random_features_embed(pair, out_dim=12, hidden=32, seed=5)
        b = random_features_embed(pair, out_dim=12, hidden=32, seed=5)
        assert a.x.shape == (300, 12)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
        np.testing.assert_allclose(_col_std(a.y), 1, atol=1e-9)

    def test_spread_information(self):
        assert rho_for_target_mi(1, np.log(10))[0] == pytest.approx(0.99499, abs=1e-5)
        pair = spread_information_pair(16, 1, np.log(10), 5000, seed=0)
        assert pair.true_mi == pytest.approx(2.3026, abs=1e-4)
        c = pair.x.T @ pair.y / pair.t
        assert c[0, 0] == pytest.approx(0.995, abs=0.003)
        assert np.abs(c[1:, 1:]).max() < 0.07
        with pytest.raises(GenerationError):
            spread_information_pair(4, 5, 1.0, 10)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 6))
    def test_standardised_columns(self, seed, k):
        pair = generate_gaussian_pair(GaussianPairSpec(k, (0.3,), 50, seed=seed))
        assert np.all(np.abs(_col_std(pair.x) - 1) < 1e-9)
        assert np.all(np.abs(_col_std(pair.y) - 1) < 1e-9)


class TestPendulum:
    def test_rest_state_is_fixed(self):
        spec = PendulumSpec(n_experiments=1, obs_dim=4)
        sim = simulate_pendulum(spec, theta0=[0.0], omega0=[0.0])
        np.testing.assert_array_equal(sim.theta, 0.0)
        np.testing.assert_array_equal(sim.omega, 0.0)

    def test_small_angle_period(self):
        spec = PendulumSpec(n_experiments=1, obs_dim=4, frames_per_experiment=300)
        sim = simulate_pendulum(spec, theta0=[0.1], omega0=[0.0])
        theta = sim.theta[0]
        # Upward zero crossings of theta, linearly interpolated.
        idx = np.where((theta[:-1] < 0) & (theta[1:] >= 0))[0]
        times = (idx + theta[idx] / (theta[idx] - theta[idx + 1])) / spec.sample_rate
        period = np.diff(times).mean()
        expected = 2 * np.pi * np.sqrt(spec.length / spec.gravity)
        assert period == pytest.approx(1.4185, abs=1e-3)
        assert abs(period / expected - 1) < 0.02

    def test_energy_conserved(self):
        spec = PendulumSpec(n_experiments=50, obs_dim=4, seed=2)
        sim = simulate_pendulum(spec)
        e = pendulum_energy(sim.theta, sim.omega, spec)
        assert (np.abs(e - e[:, :1]).max(axis=1) / e[:, 0]).max() < 1e-6

    def test_theta_wrapped(self):
        spec = PendulumSpec(n_experiments=30, obs_dim=4, seed=3, max_energy_factor=3.0)
        sim = simulate_pendulum(spec)
        assert np.all(sim.theta > -np.pi) and np.all(sim.theta <= np.pi)

    def test_windows(self):
        spec = PendulumSpec(n_experiments=3, obs_dim=5, frames_per_experiment=10)
        sim = simulate_pendulum(spec)
        per = 10 - 2 * 2 + 1
        assert sim.x.shape == (3 * per, 10) and sim.y.shape == (3 * per, 10)
        # Y of window t starts with the frame after the X window ends.
        np.testing.assert_array_equal(sim.y[0, :5], sim.frames[0, 2])
        np.testing.assert_array_equal(sim.x[1, :5], sim.frames[0, 1])

    def test_coarse_integration_raises(self):
        spec = PendulumSpec(n_experiments=4, obs_dim=4, substeps=1, sample_rate=3.0, seed=0)
        with pytest.raises(IntegratorError):
            simulate_pendulum(spec)
