import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.interpolate import BSpline

from sjlgm.splines import SplineConfig, basis_dimension, default_knots, evaluate_basis, make_config


def cox_de_boor_scalar(u, j, d, t):
    """Textbook recursive definition, used as an independent oracle."""
    if d == 0:
        if u[j] <= t < u[j + 1]:
            return 1.0
        # right endpoint closes the last non-empty span
        if t == u[-1] and u[j] < u[j + 1] == u[-1]:
            return 1.0
        return 0.0
    out = 0.0
    if u[j + d] > u[j]:
        out += (t - u[j]) / (u[j + d] - u[j]) * cox_de_boor_scalar(u, j, d - 1, t)
    if u[j + d + 1] > u[j + 1]:
        out += (u[j + d + 1] - t) / (u[j + d + 1] - u[j + 1]) * cox_de_boor_scalar(u, j + 1, d - 1, t)
    return out


def random_config(rng):
    d = int(rng.integers(0, 5))
    lo = rng.uniform(-2, 1)
    hi = lo + rng.uniform(0.5, 4)
    l = int(rng.integers(0, 7))
    knots = np.sort(rng.uniform(lo, hi, size=l))
    knots = knots[(knots > lo) & (knots < hi)]
    knots = np.unique(knots)
    return SplineConfig(d, tuple(knots), (lo, hi))


class TestBasisDimension:
    @pytest.mark.parametrize("d,l,expected", [(3, 1, 5), (0, 1, 2), (3, 3, 7)])
    def test_dimension(self, d, l, expected):
        c = SplineConfig(d, tuple(np.linspace(0, 1, l + 2)[1:-1]), (0.0, 1.0))
        assert basis_dimension(c) == expected
        assert evaluate_basis(c, [0.3]).shape == (1, expected)


class TestEvaluateBasis:
    def test_step_function(self):
        c = SplineConfig(0, (0.5,), (0.0, 1.0))
        assert_allclose(evaluate_basis(c, [0.2]), [[1.0, 0.0]])

    def test_hat_functions(self):
        c = SplineConfig(1, (0.5,), (0.0, 1.0))
        assert_allclose(evaluate_basis(c, [0.25]), [[0.5, 0.5, 0.0]], atol=1e-15)

    def test_endpoints(self):
        c = SplineConfig(3, (0.4,), (0.0, 1.0))
        B = evaluate_basis(c, [0.0, 1.0])
        assert_allclose(B[0], np.eye(5)[0])
        assert_allclose(B[1], np.eye(5)[-1])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            evaluate_basis(SplineConfig(3, (), (0.0, 1.0)), [])

    def test_out_of_range_clamped_with_warning(self, caplog):
        c = SplineConfig(2, (0.5,), (0.0, 1.0))
        B = evaluate_basis(c, [-0.5, 1.5])
        assert_allclose(B, evaluate_basis(c, [0.0, 1.0]))
        assert "clamping 2" in caplog.text

    def test_matches_recursive_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            c = random_config(rng)
            u = c.knot_vector
            t = np.concatenate([rng.uniform(*c.boundary, size=8), c.boundary, c.interior_knots])
            B = evaluate_basis(c, t)
            ref = np.array([[cox_de_boor_scalar(u, j, c.degree, ti) for j in range(basis_dimension(c))] for ti in t])
            assert_allclose(B, ref, atol=1e-13)

    def test_matches_scipy_design_matrix(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            c = random_config(rng)
            t = rng.uniform(c.boundary[0], c.boundary[1] - 1e-9, size=20)
            ref = BSpline.design_matrix(t, c.knot_vector, c.degree).toarray()
            assert_allclose(evaluate_basis(c, t), ref, atol=1e-13)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 4), st.lists(st.floats(0.01, 0.99), max_size=5, unique=True),
           st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20))
    def test_partition_of_unity_property(self, d, knots, times):
        knots = tuple(sorted(set(round(k, 6) for k in knots)))
        c = SplineConfig(d, knots, (0.0, 1.0))
        B = evaluate_basis(c, times)
        assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(B >= -1e-15)


class TestDefaultKnots:
    def test_uniform_median(self):
        t = np.random.default_rng(0).uniform(size=10001)
        (k,) = default_knots(t, 1)
        assert abs(k - 0.5) < 0.02

    def test_zero_knots(self):
        assert default_knots(np.linspace(0, 1, 5), 0) == ()

    def test_scenario_grid_quantiles(self):
        grid = np.round(np.arange(0, 1.0001, 0.05), 10)
        k = default_knots(grid, 2)
        assert_allclose(k, np.quantile(grid, [1 / 3, 2 / 3]))
        assert_allclose(k, [1 / 3, 2 / 3], atol=0.02)

    def test_too_few_distinct_times(self):
        with pytest.raises(ValueError):
            default_knots([0.0, 0.0, 1.0], 2)

    def test_make_config_boundary(self):
        c = make_config([0.2, 0.4, 0.9, 0.5], degree=2, nknots=1)
        assert c.boundary == (0.2, 0.9)
        assert c.interior_knots == (0.45,)


class TestSplineConfig:
    @pytest.mark.parametrize("knots", [(0.0,), (1.0,), (0.6, 0.4), (0.5, 0.5)])
    def test_invalid_knots(self, knots):
        with pytest.raises(ValueError):
            SplineConfig(3, knots, (0.0, 1.0))

    def test_invalid_degree(self):
        with pytest.raises(ValueError):
            SplineConfig(-1, (), (0.0, 1.0))

    def test_tied_times_fall_back_to_distinct_quantiles(self):
        t = np.concatenate([np.zeros(50), [0.25, 0.5, 1.0]])
        k = default_knots(t, 1)
        assert 0.0 < k[0] < 1.0
        assert k == (float(np.quantile([0.0, 0.25, 0.5, 1.0], 0.5)),)
