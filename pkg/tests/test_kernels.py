"""Compact-support kernel, interpolation, power function and error constants."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose

from narxmpc import (
    AffineNormalization,
    Dataset,
    FunctionDynamics,
    KernelSpec,
    NarxDims,
    estimate_error_constants,
    estimate_lipschitz,
    fill_distance,
    fit_interpolant,
    kernel_eval,
    kernel_matrix,
    min_pairwise_distance,
    validate_error_constants,
    wendland_dphi,
    wendland_phi,
)
from narxmpc.bench import error_constant_samples

PHI_AT_ZERO = 1.0 / 30.0
PHI_AT_HALF = 0.0036458333333333334
SQRT_PHI_AT_ZERO = 0.18257418583505536


def _identity_norm() -> AffineNormalization:
    return AffineNormalization(
        y_ref=np.array([0.0]),
        y_scale=np.array([1.0]),
        u_ref=np.array([0.0]),
        u_scale=np.array([1.0]),
    )


def _dataset(sites, targets) -> Dataset:
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    dims = NarxDims(p=1, m=1, nu=1)
    return Dataset(
        sites=sites,
        targets=np.reshape(targets, (sites.shape[0], 1)),
        dims=dims,
        normalization=_identity_norm(),
        contains_origin=False,
    )


class TestProfile:
    def test_value_at_zero(self):
        assert wendland_phi(np.array(0.0)) == pytest.approx(PHI_AT_ZERO, rel=1e-15)

    def test_support_boundary_and_beyond(self):
        assert_allclose(wendland_phi(np.array([1.0, 1.5, 2.0])), np.zeros(3), atol=0.0)

    def test_value_at_half(self):
        assert wendland_phi(np.array(0.5)) == pytest.approx(PHI_AT_HALF, rel=1e-15)

    def test_negative_radius_rejected(self):
        with pytest.raises(ValueError):
            wendland_phi(np.array(-0.1))

    def test_derivative_values(self):
        # phi'(r) = -r (1 - r)^4 on [0, 1]
        r = np.array([0.0, 0.25, 0.5, 1.0, 1.5])
        expected = np.where(r <= 1.0, -r * (1.0 - r) ** 4, 0.0)
        assert_allclose(wendland_dphi(r), expected, rtol=1e-14, atol=1e-16)

    def test_derivative_matches_finite_difference(self):
        r = np.linspace(0.05, 0.95, 19)
        h = 1e-7
        fd = (wendland_phi(r + h) - wendland_phi(r - h)) / (2.0 * h)
        assert_allclose(wendland_dphi(r), fd, rtol=0.0, atol=1e-8)


class TestKernelEval:
    def test_coincident_points(self):
        spec = KernelSpec(input_dim=2)
        xi = np.array([0.3, -0.2])
        assert kernel_eval(spec, xi, xi) == pytest.approx(PHI_AT_ZERO, rel=1e-15)

    def test_compact_support(self):
        spec = KernelSpec(input_dim=2, lengthscale=1.0)
        assert kernel_eval(spec, np.zeros(2), np.array([1.0, 0.0])) == 0.0
        assert kernel_eval(spec, np.zeros(2), np.array([3.0, 4.0])) == 0.0

    def test_lengthscale_rescales_radius(self):
        spec = KernelSpec(input_dim=2, lengthscale=2.0)
        got = kernel_eval(spec, np.zeros(2), np.array([1.0, 0.0]))
        assert got == pytest.approx(PHI_AT_HALF, rel=1e-15)

    def test_symmetry(self):
        spec = KernelSpec(input_dim=3, lengthscale=1.7)
        rng = np.random.default_rng(5)
        for _ in range(20):
            a, b = rng.standard_normal(3), rng.standard_normal(3)
            assert kernel_eval(spec, a, b) == kernel_eval(spec, b, a)

    def test_matrix_matches_pointwise(self):
        spec = KernelSpec(input_dim=2, lengthscale=1.5)
        rng = np.random.default_rng(6)
        A = rng.uniform(0.0, 1.0, size=(7, 2))
        K = kernel_matrix(spec, A)
        manual = np.array([[kernel_eval(spec, a, b) for b in A] for a in A])
        assert_allclose(K, manual, rtol=0.0, atol=1e-16)
        assert_allclose(K, K.T, rtol=0.0, atol=0.0)
        assert_allclose(np.diag(K), np.full(7, PHI_AT_ZERO), rtol=1e-15)

    def test_spec_dimension_limit(self):
        # positive definiteness of this profile holds only up to dimension 5
        with pytest.raises(ValueError):
            KernelSpec(input_dim=6)
        with pytest.raises(ValueError):
            KernelSpec(input_dim=2, lengthscale=0.0)


class TestInterpolant:
    def test_single_site_coefficient(self):
        data = _dataset([[0.3, 0.4]], [0.7])
        model = fit_interpolant(KernelSpec(input_dim=2), data)
        assert_allclose(model.coefficients, [[30.0 * 0.7]], rtol=1e-12)
        assert_allclose(model.predict(np.array([0.3, 0.4])), [0.7], rtol=1e-12)
        assert model.site_residual <= 1e-12
        assert not model.certificate_degraded

    def test_disjoint_supports_decouple(self):
        data = _dataset([[0.0, 0.0], [5.0, 5.0]], [0.4, -1.1])
        model = fit_interpolant(KernelSpec(input_dim=2), data)
        assert_allclose(model.coefficients.ravel(), [30.0 * 0.4, 30.0 * -1.1], rtol=1e-12)

    def test_prediction_vanishes_off_support(self):
        data = _dataset([[0.0, 0.0]], [0.9])
        model = fit_interpolant(KernelSpec(input_dim=2), data)
        assert model.predict(np.array([2.0, 2.0]))[0] == 0.0

    def test_predict_batch_matches_scalar(self):
        rng = np.random.default_rng(8)
        data = _dataset(rng.uniform(0.0, 1.0, size=(12, 2)), rng.standard_normal(12))
        model = fit_interpolant(KernelSpec(input_dim=2), data)
        Xi = rng.uniform(0.0, 1.0, size=(25, 2))
        batch = model.predict_batch(Xi)
        single = np.stack([model.predict(xi) for xi in Xi])
        assert_allclose(batch, single, rtol=0.0, atol=1e-14)

    def test_benchmark_fit_interpolates(self, fit_101):
        data, model = fit_101
        assert model.site_residual <= 1e-8
        pred = model.predict_batch(data.sites)
        assert np.max(np.abs(pred - data.targets)) <= 1e-8
        # the equilibrium site is the first row and maps to target zero
        assert abs(model.predict(data.sites[0])[0]) <= 1e-8

    def test_jacobian_matches_finite_difference(self, fit_101):
        _, model = fit_101
        rng = np.random.default_rng(9)
        xi = rng.uniform(-0.05, 0.3, size=4)
        jac = model.jacobian(xi)
        h = 1e-6
        fd = np.zeros_like(jac)
        for j in range(xi.size):
            e = np.zeros(xi.size)
            e[j] = h
            fd[:, j] = (model.predict(xi + e) - model.predict(xi - e)) / (2.0 * h)
        assert_allclose(jac, fd, rtol=0.0, atol=1e-7)

    def test_jitter_flags_certificates(self):
        data = _dataset([[0.0, 0.0], [0.4, 0.1]], [0.1, 0.2])
        model = fit_interpolant(KernelSpec(input_dim=2), data, jitter=1e-10)
        assert model.certificate_degraded


class TestPowerFunction:
    def test_zero_at_sites(self, fit_101):
        data, model = fit_101
        values = model.power_function(data.sites)
        assert np.max(values) <= 1e-7

    def test_far_field_limit(self):
        data = _dataset([[0.0, 0.0]], [1.0])
        model = fit_interpolant(KernelSpec(input_dim=2), data)
        far = model.power_function(np.array([[10.0, 10.0]]))
        assert far[0] == pytest.approx(SQRT_PHI_AT_ZERO, rel=1e-15)

    def test_appending_probe_removes_uncertainty(self):
        rng = np.random.default_rng(10)
        sites = rng.uniform(0.0, 1.0, size=(6, 2))
        probe = np.array([0.77, 0.13])
        small = fit_interpolant(KernelSpec(input_dim=2), _dataset(sites, np.zeros(6)))
        assert small.power_function(probe[None, :])[0] > 1e-4
        grown = fit_interpolant(
            KernelSpec(input_dim=2), _dataset(np.vstack([sites, probe]), np.zeros(7))
        )
        assert grown.power_function(probe[None, :])[0] <= 1e-7

    def test_monotone_under_site_refinement(self):
        rng = np.random.default_rng(12)
        sites = rng.uniform(0.0, 1.0, size=(9, 2))
        subset = fit_interpolant(KernelSpec(input_dim=2), _dataset(sites[:5], np.zeros(5)))
        full = fit_interpolant(KernelSpec(input_dim=2), _dataset(sites, np.zeros(9)))
        probes = rng.uniform(0.0, 1.0, size=(200, 2))
        p_sub = subset.power_function(probes)
        p_full = full.power_function(probes)
        assert np.all(p_full <= p_sub + 1e-10)


class TestNativeNorm:
    def test_zero_targets(self):
        data = _dataset([[0.1, 0.2], [0.6, 0.7]], [0.0, 0.0])
        model = fit_interpolant(KernelSpec(input_dim=2), data)
        assert model.rkhs_norm() == pytest.approx(0.0, abs=1e-14)

    def test_single_site_closed_form(self):
        data = _dataset([[0.3, 0.4]], [0.7])
        model = fit_interpolant(KernelSpec(input_dim=2), data)
        assert model.rkhs_norm() == pytest.approx(0.7 * np.sqrt(30.0), rel=1e-12)

    def test_representer_quadratic_form(self):
        rng = np.random.default_rng(13)
        sites = rng.uniform(0.0, 1.0, size=(8, 2))
        spec = KernelSpec(input_dim=2)
        K = kernel_matrix(spec, sites)
        beta = rng.standard_normal((8, 1))
        model = fit_interpolant(spec, _dataset(sites, K @ beta))
        assert_allclose(model.coefficients, beta, rtol=0.0, atol=1e-9)
        expected = float(np.sqrt((beta.T @ K @ beta).item()))
        assert model.rkhs_norm() == pytest.approx(expected, rel=1e-9)


class TestFillDistance:
    def test_center_site_unit_square(self):
        sites = np.array([[0.5, 0.5]])
        probes = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        assert fill_distance(sites, probes) == pytest.approx(np.sqrt(0.5), rel=1e-15)

    def test_probes_inside_sites(self):
        rng = np.random.default_rng(14)
        sites = rng.uniform(0.0, 1.0, size=(20, 3))
        assert fill_distance(sites, sites[::2]) == 0.0

    def test_refinement_never_increases(self):
        rng = np.random.default_rng(15)
        sites = rng.uniform(0.0, 1.0, size=(30, 2))
        probes = rng.uniform(0.0, 1.0, size=(100, 2))
        assert fill_distance(sites, probes) <= fill_distance(sites[:10], probes)

    def test_min_pairwise_distance(self):
        sites = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]])
        assert min_pairwise_distance(sites) == pytest.approx(1.0, rel=1e-15)


class TestDatasetValidation:
    def test_near_duplicate_sites_rejected(self):
        with pytest.raises(ValueError):
            _dataset([[0.1, 0.1], [0.1, 0.1 + 1e-13]], [0.0, 0.0])

    def test_row_count_mismatch(self):
        dims = NarxDims(p=1, m=1, nu=1)
        with pytest.raises(ValueError):
            Dataset(
                sites=np.zeros((2, 2)),
                targets=np.zeros((3, 1)),
                dims=dims,
                normalization=_identity_norm(),
            )

    def test_site_width_mismatch(self):
        dims = NarxDims(p=1, m=1, nu=2)
        with pytest.raises(ValueError):
            Dataset(
                sites=np.zeros((1, 2)),
                targets=np.zeros((1, 1)),
                dims=dims,
                normalization=_identity_norm(),
            )

    def test_origin_flag_requires_origin_site(self):
        dims = NarxDims(p=1, m=1, nu=1)
        with pytest.raises(ValueError):
            Dataset(
                sites=np.array([[0.5, 0.5]]),
                targets=np.zeros((1, 1)),
                dims=dims,
                normalization=_identity_norm(),
                contains_origin=True,
            )

    def test_spec_width_checked_at_fit(self):
        data = _dataset([[0.1, 0.2]], [0.3])
        with pytest.raises(ValueError):
            fit_interpolant(KernelSpec(input_dim=3), data)


def _scalar_dims() -> NarxDims:
    return NarxDims(p=1, m=1, nu=1)


def _samples(count: int, seed: int):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(count, 1))
    U = rng.uniform(-1.0, 1.0, size=(count, 1))
    X[0] = 0.0
    U[0] = 0.0
    return X, U


class TestErrorConstants:
    def test_exact_model_gives_zero_constants(self):
        dims = _scalar_dims()
        fn = lambda x, u: np.array([0.5 * x[0] - 0.2 * u[0]])
        truth = FunctionDynamics(dims, fn)
        model = FunctionDynamics(dims, fn)
        X, U = _samples(150, 16)
        constants = estimate_error_constants(truth, model, X, U)
        assert constants.c_x == 0.0
        assert constants.c_u == 0.0

    def test_state_proportional_bias_recovered(self):
        dims = _scalar_dims()
        truth = FunctionDynamics(dims, lambda x, u: np.array([0.5 * x[0]]))
        model = FunctionDynamics(
            dims, lambda x, u: np.array([0.5 * x[0] + 0.01 * np.linalg.norm(x)])
        )
        X, U = _samples(200, 17)
        constants = estimate_error_constants(truth, model, X, U)
        assert constants.c_x == pytest.approx(0.01, rel=1e-9)
        assert constants.c_u == 0.0
        assert constants.max_ratio <= 1.0 + 1e-9

    def test_input_proportional_bias_recovered(self):
        dims = _scalar_dims()
        truth = FunctionDynamics(dims, lambda x, u: np.array([0.5 * x[0]]))
        model = FunctionDynamics(
            dims, lambda x, u: np.array([0.5 * x[0] + 0.2 * np.linalg.norm(u)])
        )
        X, U = _samples(200, 18)
        constants = estimate_error_constants(truth, model, X, U)
        assert constants.c_x + constants.c_u <= 0.2 + 1e-6
        bound = constants.bound(
            np.linalg.norm(X, axis=1), np.linalg.norm(U, axis=1)
        )
        residual = 0.2 * np.abs(U).ravel()
        assert np.all(residual <= bound + 1e-9)

    def test_too_few_samples_rejected(self):
        dims = _scalar_dims()
        f = FunctionDynamics(dims, lambda x, u: np.zeros(1))
        X, U = _samples(99, 19)
        with pytest.raises(ValueError):
            estimate_error_constants(f, f, X, U)

    def test_equilibrium_mismatch_rejected(self):
        dims = _scalar_dims()
        truth = FunctionDynamics(dims, lambda x, u: np.zeros(1))
        model = FunctionDynamics(dims, lambda x, u: np.array([0.5]))
        X, U = _samples(150, 20)
        with pytest.raises(ValueError):
            estimate_error_constants(truth, model, X, U)

    def test_validation_on_benchmark_fit(self, cfg, plant_view, fit_101):
        _, model = fit_101
        X, U = error_constant_samples(cfg, 300, cfg.seed + 11)
        constants = estimate_error_constants(plant_view, model, X, U)
        X_fresh, U_fresh = error_constant_samples(cfg, 300, cfg.seed + 13)
        outcome = validate_error_constants(constants, plant_view, model, X_fresh, U_fresh)
        assert not outcome["flagged"]
        assert outcome["max_ratio"] <= 2.0


class TestLipschitz:
    def test_constant_map(self):
        dims = _scalar_dims()
        f = FunctionDynamics(dims, lambda x, u: np.array([0.3]))
        rng = np.random.default_rng(21)
        Xi_a = rng.uniform(-1.0, 1.0, size=(50, 2))
        Xi_b = rng.uniform(-1.0, 1.0, size=(50, 2))
        assert estimate_lipschitz(f, Xi_a, Xi_b) == 0.0

    def test_linear_map_slope_attained(self):
        dims = _scalar_dims()
        f = FunctionDynamics(dims, lambda x, u: np.array([2.0 * x[0]]))
        t = np.linspace(-1.0, 1.0, 20)
        Xi_a = np.column_stack([t, np.zeros(20)])
        Xi_b = np.column_stack([t + 0.1, np.zeros(20)])
        slope = estimate_lipschitz(f, Xi_a, Xi_b)
        assert slope == pytest.approx(2.0, abs=1e-6)

    def test_benchmark_fit_is_finite(self, fit_101):
        _, model = fit_101
        rng = np.random.default_rng(22)
        Xi_a = rng.uniform(-0.1, 0.5, size=(100, 4))
        Xi_b = rng.uniform(-0.1, 0.5, size=(100, 4))
        slope = estimate_lipschitz(model, Xi_a, Xi_b)
        assert np.isfinite(slope)
        assert slope > 0.0
