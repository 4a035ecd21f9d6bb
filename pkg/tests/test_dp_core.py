"""
Tests for clipping, noising, parameter vectors and the RDP accountant
"""

import math

import numpy as np
import pytest

from dpfedgen.dp_core import (DEFAULT_ORDERS, DpSpec, ParamLayout, ParamVector, RdpCurve, clip_update,
                              compose_rounds, compute_privacy_spend, gaussianize, noise_stddev, one_round_curve,
                              preset_delta, project_to_scale, rdp_subsampled_gaussian, rdp_to_eps, spend_table)
from dpfedgen.exceptions import LayoutMismatchError, NonFiniteError, PrivacyParameterError

LAYOUT = ParamLayout("test:2x2+3", (("W", (2, 2)), ("b", (3,))))


def vector(values, layout=LAYOUT):
    return ParamVector(np.asarray(values, dtype=np.float64), layout)


def spec(qn, n, z=1.0, clip=0.1, rounds=1000, delta=1e-5):
    return DpSpec(clip, z, qn, n, rounds, delta)


class TestParamVector:

    def test_layout_round_trip(self):
        arrays = {"W": np.arange(4.0).reshape(2, 2), "b": np.array([4.0, 5.0, 6.0])}
        params = ParamVector.from_arrays(LAYOUT, arrays)
        np.testing.assert_array_equal(params.values, np.arange(7.0))
        np.testing.assert_array_equal(params.arrays()["W"], arrays["W"])
        assert LAYOUT.size == 7
        assert ParamLayout.from_dict(LAYOUT.to_dict()) == LAYOUT

    def test_arithmetic(self):
        a = vector(np.ones(7))
        b = vector(np.arange(7.0))
        np.testing.assert_array_equal((a + b).values, np.arange(7.0) + 1)
        np.testing.assert_array_equal((b - a).values, np.arange(7.0) - 1)
        np.testing.assert_array_equal(a.scale(2.5).values, np.full(7, 2.5))

    def test_mismatched_layouts_do_not_combine(self):
        other = ParamLayout("other:7", (("v", (7,)),))
        with pytest.raises(LayoutMismatchError):
            vector(np.ones(7)) + vector(np.ones(7), other)

    def test_non_finite_rejected(self):
        values = np.ones(7)
        values[3] = np.inf
        with pytest.raises(NonFiniteError):
            vector(values)

    def test_wrong_size_rejected(self):
        with pytest.raises(ValueError):
            vector(np.ones(6))

    def test_values_are_read_only(self):
        params = vector(np.ones(7))
        with pytest.raises(ValueError):
            params.values[0] = 2.0


class TestDpSpec:

    def test_valid(self):
        s = spec(10, 3400, z=0.01)
        assert s.sampling_rate == pytest.approx(10 / 3400)

    @pytest.mark.parametrize("kwargs", [
        {"clip": 0.0}, {"noise_multiplier": -0.1}, {"clients_per_round": 0}, {"clients_per_round": 11},
        {"rounds": 0}, {"delta": 0.0}, {"delta": 1.0}, {"noise_multiplier": math.nan},
    ])
    def test_invalid(self, kwargs):
        values = {"clip": 0.1, "noise_multiplier": 1.0, "clients_per_round": 5, "population": 10,
                  "rounds": 1, "delta": 1e-3}
        values.update(kwargs)
        with pytest.raises(PrivacyParameterError):
            DpSpec(**values)


class TestClipUpdate:

    def test_halves_update_twice_the_bound(self):
        delta = vector(np.ones(7)).scale(0.2 / math.sqrt(7))
        clipped = clip_update(delta, 0.1)
        np.testing.assert_allclose(clipped.values, delta.values * 0.5)
        assert clipped.norm() == pytest.approx(0.1)

    def test_inside_ball_is_unchanged(self):
        delta = vector(np.ones(7)).scale(0.05 / math.sqrt(7))
        assert clip_update(delta, 0.1) is delta

    def test_zero_vector(self):
        zero = ParamVector.zeros(LAYOUT)
        assert clip_update(zero, 0.3) == zero

    def test_norm_bound_on_random_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            scale = 10 ** rng.uniform(-4, 4)
            clip = 10 ** rng.uniform(-3, 1)
            delta = vector(rng.normal(size=7) * scale)
            clipped = clip_update(delta, clip)
            assert clipped.norm() <= clip * (1 + 1e-12)
            # direction preserved
            cosine = np.dot(clipped.values, delta.values) / (clipped.norm() * delta.norm())
            assert cosine == pytest.approx(1.0)

    def test_invalid_clip(self):
        with pytest.raises(PrivacyParameterError):
            clip_update(vector(np.ones(7)), 0.0)


class TestNoise:

    @pytest.mark.parametrize("z, clip, qn, sigma", [
        (0.01, 0.1, 10, 1e-4),
        (1.0, 0.1, 1000, 1e-4),
        (1.0, 0.2, 5000, 4e-6),
    ])
    def test_noise_stddev(self, z, clip, qn, sigma):
        assert noise_stddev(DpSpec(clip, z, qn, 10 * qn, 1, 1e-6)) == pytest.approx(sigma, rel=1e-12)

    def test_no_noise_when_z_is_zero(self):
        assert noise_stddev(DpSpec(0.1, 0.0, 10, 100, 1, 0.01)) == 0.0

    def test_zero_sigma_is_identity(self):
        params = vector(np.arange(7.0))
        assert gaussianize(params, 0.0, seed=3) is params

    def test_same_seed_same_noise(self):
        params = vector(np.zeros(7))
        assert gaussianize(params, 1.0, seed=11) == gaussianize(params, 1.0, seed=11)
        assert gaussianize(params, 1.0, seed=11) != gaussianize(params, 1.0, seed=12)

    def test_noise_moments(self):
        layout = ParamLayout("big", (("v", (1_000_000,)),))
        noised = gaussianize(ParamVector.zeros(layout), 1.0, seed=5)
        assert abs(noised.values.mean()) <= 0.01
        assert 0.995 <= noised.values.std() <= 1.005

    def test_negative_sigma(self):
        with pytest.raises(PrivacyParameterError):
            gaussianize(vector(np.zeros(7)), -1.0, seed=0)


class TestRdpCurve:

    def test_full_sampling_is_gaussian_closed_form(self):
        curve = rdp_subsampled_gaussian(1.0, 1.0, [2.0])
        assert curve.values[0] == pytest.approx(1.0)
        for z in (0.5, 1.0, 3.0):
            curve = rdp_subsampled_gaussian(1.0, z, DEFAULT_ORDERS)
            for order, value in zip(curve.orders, curve.values):
                assert value == pytest.approx(order / (2 * z * z), rel=1e-9)

    def test_vanishing_sampling_rate(self):
        curve = rdp_subsampled_gaussian(1e-12, 1.0, [2.0, 8.0, 32.0])
        assert all(v < 1e-9 for v in curve.values)

    def test_larger_orders_cost_more(self):
        curve = rdp_subsampled_gaussian(0.004, 1.0, DEFAULT_ORDERS)
        assert all(v >= 0 for v in curve.values)
        assert curve.value_at(2.0) < curve.value_at(8.0) < curve.value_at(64.0)

    @pytest.mark.parametrize("q, z", [(0.0, 1.0), (1.5, 1.0), (0.1, 0.0)])
    def test_invalid_inputs(self, q, z):
        with pytest.raises(PrivacyParameterError):
            rdp_subsampled_gaussian(q, z, DEFAULT_ORDERS)

    def test_orders_must_exceed_one(self):
        with pytest.raises(PrivacyParameterError):
            rdp_subsampled_gaussian(0.1, 1.0, [1.0, 2.0])

    def test_compose_rounds(self):
        curve = rdp_subsampled_gaussian(0.01, 1.0, [2.0, 4.0])
        assert compose_rounds(curve, 1) == curve
        doubled = compose_rounds(curve, 2)
        assert doubled.values == tuple(2 * v for v in curve.values)
        zero = RdpCurve((2.0, 3.0), (0.0, 0.0))
        assert compose_rounds(zero, 1000).values == (0.0, 0.0)
        with pytest.raises(PrivacyParameterError):
            compose_rounds(curve, 0)


class TestRdpToEps:

    def test_gaussian_closed_form(self):
        orders = [1 + k / 100 for k in range(1, 2000)]
        spend = rdp_to_eps(rdp_subsampled_gaussian(1.0, 1.0, orders), 1e-5)
        assert spend.epsilon == pytest.approx(5.30, abs=0.01)
        assert spend.order == pytest.approx(5.80, abs=0.02)
        assert spend.order in orders

    def test_refined_default_grid_matches_dense_grid(self):
        s = DpSpec(1.0, 1.0, 100, 100, 1, 1e-5)
        assert compute_privacy_spend(s).epsilon == pytest.approx(5.30, abs=0.01)

    def test_empty_grid(self):
        with pytest.raises(PrivacyParameterError):
            rdp_to_eps(RdpCurve((), ()), 1e-5)

    def test_invalid_delta(self):
        with pytest.raises(PrivacyParameterError):
            rdp_to_eps(rdp_subsampled_gaussian(0.1, 1.0, [2.0]), 1.0)

    def test_no_noise_is_unbounded(self):
        spend = compute_privacy_spend(DpSpec(0.1, 0.0, 10, 100, 5, 1e-4))
        assert math.isinf(spend.epsilon)
        assert one_round_curve(DpSpec(0.1, 0.0, 10, 100, 5, 1e-4)) == RdpCurve.unbounded()


class TestPublishedSettings:
    """Accountant against the published privacy tables (5% relative tolerance)"""

    @pytest.mark.parametrize("population, delta, expected", [
        (250_000, 4.00e-8, 2.38),
        (1_250_000, 8.00e-9, 1.48),
        (500_000, 2.00e-8, 1.79),
    ])
    def test_gan_by_user_realistic_rows(self, population, delta, expected):
        spend = compute_privacy_spend(spec(1000, population, delta=delta))
        assert spend.epsilon == pytest.approx(expected, rel=0.05)

    @pytest.mark.parametrize("population, delta, expected", [
        (1_708_824, 5.85e-9, 1.47),
        (1_964_706, 5.09e-9, 1.40),
        (2_000_000, 5.00e-9, 1.39),
        (1_930_588, 5.18e-9, 1.40),
    ])
    def test_gan_by_example_realistic_rows(self, population, delta, expected):
        spend = compute_privacy_spend(spec(1000, population, delta=delta))
        assert spend.epsilon == pytest.approx(expected, rel=0.05)

    def test_word_lm_setting(self):
        s = DpSpec(0.2, 1.0, 5000, 342_477, 2000, 2.92e-6)
        assert compute_privacy_spend(s).epsilon == pytest.approx(9.22, rel=0.05)

    def test_refined_order_is_in_refined_grid(self):
        spend = compute_privacy_spend(spec(1000, 250_000, delta=4e-8))
        assert spend.order > 1
        coarse = compute_privacy_spend(spec(1000, 250_000, delta=4e-8), refine=False)
        assert coarse.order in DEFAULT_ORDERS
        assert spend.epsilon <= coarse.epsilon


class TestMonotonicity:

    def test_nonincreasing_in_noise(self):
        values = [compute_privacy_spend(spec(100, 10_000, z=z, rounds=100), refine=False).epsilon
                  for z in (0.8, 1.0, 1.5, 2.0)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_nondecreasing_in_rounds(self):
        values = [compute_privacy_spend(spec(100, 10_000, rounds=t), refine=False).epsilon
                  for t in (10, 100, 1000)]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_nondecreasing_in_sampling_rate(self):
        values = [compute_privacy_spend(spec(qn, 10_000, rounds=100), refine=False).epsilon
                  for qn in (10, 100, 1000)]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_nonincreasing_in_delta(self):
        values = [compute_privacy_spend(spec(100, 10_000, rounds=100, delta=d), refine=False).epsilon
                  for d in (1e-8, 1e-6, 1e-4)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestPresetsAndProjection:

    def test_presets(self):
        assert preset_delta(1000, "inv-n") == pytest.approx(1e-3)
        assert preset_delta(1000, "inv-100n") == pytest.approx(1e-5)
        assert preset_delta(1000, "explicit", 0.5) == 0.5
        with pytest.raises(PrivacyParameterError):
            preset_delta(1000, "explicit")
        with pytest.raises(PrivacyParameterError):
            preset_delta(1000, "inv-n2")

    def test_projection_keeps_sigma_and_share(self):
        simulated = DpSpec(0.1, 0.01, 10, 2905, 1000, 3.44e-4)
        realistic = project_to_scale(simulated, 3400, 2_000_000, 1000)
        assert realistic.clients_per_round == 1000
        assert realistic.population == 1_708_824
        assert realistic.noise_multiplier == pytest.approx(1.0)
        assert noise_stddev(realistic) == pytest.approx(noise_stddev(simulated))
        assert realistic.delta == pytest.approx(5.85e-9, rel=1e-3)
        assert realistic.rounds == simulated.rounds and realistic.clip == simulated.clip

    def test_projection_needs_consistent_totals(self):
        with pytest.raises(PrivacyParameterError):
            project_to_scale(DpSpec(0.1, 0.01, 10, 2905, 1000, 1e-4), 1000, 2_000_000, 1000)

    def test_spend_table_columns(self):
        rows = spend_table([spec(1000, 250_000, delta=4e-8)], refine=False)
        assert list(rows[0]) == ["qN", "N", "q", "z", "S", "T", "delta", "epsilon", "order"]
        assert rows[0]["q"] == pytest.approx(0.004)
