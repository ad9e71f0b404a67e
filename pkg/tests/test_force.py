import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinmech.beam import BeamGeometry, moment_of_area
from spinmech.exceptions import NonInvertibleError, RankDeficiencyError
from spinmech.force import (
    MeasurementModel,
    PixelArray,
    ac_band,
    crossover_grid,
    diagonal_pair_offsets,
    gradient_crossover,
    minimum_force,
    pixel_noise,
    reconstruct_force_image,
    responsivity,
    sensitivity,
    shot_noise_sensitivity,
    simulate_pixel_measurements,
    superpixel_invert,
)
from spinmech.spin import DEFAULT_PARAMS as P
from spinmech.units import MHz, mT_per_um, pN, uN, um

W, H = 0.1 * um, 1.0 * um
PILLAR = BeamGeometry.pillar(W, H)


def _array(ni=4, nj=4, spacing=0.5 * um):
    return PixelArray(PILLAR, spacing, diagonal_pair_offsets(ni, nj, W / 2))


class TestResponsivity:
    def test_reference_value(self):
        r = responsivity(PILLAR, W / 2)
        assert r / MHz * uN == pytest.approx(P.a1 * H * (W / 2) / moment_of_area(PILLAR) / MHz * uN, rel=1e-12)
        assert r / MHz * uN == pytest.approx(49.5, rel=0.01)

    def test_neutral_axis(self):
        assert responsivity(PILLAR, 0.0) == 0.0
        with pytest.raises(NonInvertibleError):
            shot_noise_sensitivity(0.0)

    def test_branches(self):
        base = responsivity(PILLAR, W / 2)
        plus = responsivity(PILLAR, W / 2, response="plus")
        minus = responsivity(PILLAR, W / 2, response="minus")
        assert plus - base == pytest.approx(base - minus)
        assert (plus - minus) / base == pytest.approx(4 * abs(P.b) / P.a1)

    @pytest.mark.parametrize("scale", [1.5, 2.0, 3.0])
    def test_scaling_laws(self, scale):
        r0 = responsivity(PILLAR, W / 2)
        assert responsivity(BeamGeometry.pillar(W, scale * H), W / 2) == pytest.approx(scale * r0)
        g = BeamGeometry.pillar(scale * W, 10 * scale * W)
        # xi = w/2 and h fixed relative: responsivity ~ h w^-3
        assert responsivity(g, scale * W / 2) == pytest.approx(r0 * scale * scale**-3, rel=1e-12)

    def test_depth_offset_linear(self):
        r0 = responsivity(PILLAR, W / 2)
        assert responsivity(PILLAR, W / 2, depth=0.25 * H) == pytest.approx(0.75 * r0)


class TestSensitivity:
    def test_eta_values(self):
        res = sensitivity(PILLAR, W / 2)
        assert res.eta_dc / pN == pytest.approx(100, rel=0.1)
        assert res.eta_ac / pN == pytest.approx(32, rel=0.1)
        assert res.fmin_dc / pN == pytest.approx(100, rel=0.1)
        assert res.fmin_dc == pytest.approx(res.eta_dc / np.sqrt(1.0))

    @pytest.mark.parametrize("k", [2.0, 4.0, 9.0])
    def test_sqrt_scalings(self, k):
        r = 50 * MHz / uN
        assert shot_noise_sensitivity(r, MeasurementModel(T_dc=k * 1e-5)) == pytest.approx(shot_noise_sensitivity(r) / np.sqrt(k))
        assert minimum_force(1e-10, k) == pytest.approx(1e-10 / np.sqrt(k))

    def test_ac_band(self):
        b = ac_band()
        assert (b.f_lo, b.f_hi, b.empty) == pytest.approx((1e4, 1e8, False))
        assert ac_band(MeasurementModel(T_ac=50e-6)).f_lo == pytest.approx(2e4)
        assert ac_band(MeasurementModel(T_ac=1e-8, T_min=1e-8)).empty

    def test_model_validation(self):
        with pytest.raises(ValueError):
            MeasurementModel(K=0)
        with pytest.raises(ValueError):
            MeasurementModel(T_m=-1)
        with pytest.raises(ValueError):
            MeasurementModel().shot_time("XY")

    def test_optical_guard(self):
        with pytest.warns(RuntimeWarning, match="optical"):
            sensitivity(PILLAR, W / 2, optical_threshold=1e-15)


class TestCrossover:
    def test_reference_value(self):
        g = gradient_crossover(PILLAR) / mT_per_um
        assert g == pytest.approx(32, rel=0.15)
        closed = 3 * PILLAR.E * P.a1 * (W / 2) / (P.gamma_e * H**2)
        assert gradient_crossover(PILLAR) == pytest.approx(closed, rel=1e-12)

    def test_grid_scales_as_w_over_h2(self):
        ws = np.linspace(0.05, 0.5, 10) * um
        hs = np.linspace(0.5, 5, 10) * um
        grid = crossover_grid(ws, hs)
        ratio = grid / (ws[:, None] / hs[None, :] ** 2)
        assert np.allclose(ratio, ratio[0, 0], rtol=1e-12)


class TestArrays:
    def test_spacing_guard(self):
        with pytest.raises(ValueError):
            _array(spacing=100e-9)
        with pytest.raises(ValueError):
            PixelArray(PILLAR, 0.5 * um, np.full((2, 2, 2), W))

    def test_perpendicular_force_gives_zero(self):
        arr = PixelArray(PILLAR, 0.5 * um, np.tile([W / 2, 0.0], (4, 4, 1)))
        df = simulate_pixel_measurements(lambda x, y: (0 * x, 1e-10 + 0 * y), arr, noise=0)
        assert np.all(df == 0)

    def test_uniform_parallel_force_constant(self):
        arr = PixelArray(PILLAR, 0.5 * um, np.tile([W / 2, 0.0], (4, 4, 1)))
        df = simulate_pixel_measurements(lambda x, y: (1e-10 + 0 * x, 0 * y), arr, noise=0)
        assert np.ptp(df) == 0 and df[0, 0] > 0

    def test_linear_field_linear_in_index(self):
        arr = PixelArray(PILLAR, 0.5 * um, np.tile([W / 2, 0.0], (5, 5, 1)))
        df = simulate_pixel_measurements(lambda x, y: (1e-10 * x / um + 0 * y, 0 * y), arr, noise=0)
        assert np.allclose(np.diff(df, 2, axis=0), 0, atol=1e-9 * np.abs(df).max())

    def test_seeded_noise_deterministic(self):
        f = lambda x, y: (1e-10 + 0 * x, 0 * y)
        a = simulate_pixel_measurements(f, _array(), seed=5)
        b = simulate_pixel_measurements(f, _array(), seed=5)
        assert np.array_equal(a, b)

    def test_superpixel_exact_recovery(self):
        xi = diagonal_pair_offsets(2, 2, W / 2).reshape(-1, 2)
        F = np.array([3e-10, -7e-11])
        gain = P.a1 * H / moment_of_area(PILLAR)
        est = superpixel_invert(gain * xi @ F, xi, PILLAR)
        assert np.allclose(est.force, F, rtol=1e-13, atol=0)

    def test_superpixel_rank_error(self):
        xi = np.tile([W / 2, 0.0], (4, 1))
        with pytest.raises(RankDeficiencyError):
            superpixel_invert(np.zeros(4), xi, PILLAR)

    def test_covariance_matches_monte_carlo(self):
        xi = diagonal_pair_offsets(2, 2, W / 2).reshape(-1, 2)
        gain = P.a1 * H / moment_of_area(PILLAR)
        F = np.array([1e-10, 0.0])
        sigma = 2e3
        rng = np.random.default_rng(11)
        ests = np.array([
            superpixel_invert(gain * xi @ F + rng.normal(0, sigma, 4), xi, PILLAR).force for _ in range(1000)
        ])
        pred = superpixel_invert(np.zeros(4), xi, PILLAR, sigma=sigma).cov
        assert np.sqrt(np.mean((ests - F) ** 2, axis=0)) == pytest.approx(np.sqrt(np.diag(pred)), rel=0.1)

    def test_noiseless_vortex_recovered(self):
        arr = _array(8, 8)
        c = 1.75 * um
        field = lambda x, y: (-(y - c) * 1e-10 / um, (x - c) * 1e-10 / um)
        simulate_pixel_measurements(field, arr, noise=0)
        img = reconstruct_force_image(arr)
        truth = np.stack(field(img.centers[..., 0], img.centers[..., 1]), axis=-1)
        assert np.allclose(img.forces, truth, rtol=0, atol=1e-12 * np.abs(truth).max())
        assert img.resolution == pytest.approx(1.0 * um)
        assert img.forces.shape == (4, 4, 2)

    def test_masked_superpixel(self):
        off = diagonal_pair_offsets(4, 4, W / 2)
        off[0:2, 0:2] = [W / 2, 0.0]
        arr = PixelArray(PILLAR, 0.5 * um, off)
        simulate_pixel_measurements(lambda x, y: (1e-10 + 0 * x, 0 * y), arr, noise=0)
        img = reconstruct_force_image(arr)
        assert img.mask[0, 0] and not img.mask[1, 1]
        assert np.all(np.isnan(img.forces[0, 0]))
        assert img.rows()[0][-1] is True

    def test_overlapping_tiles(self):
        arr = _array(4, 4)
        simulate_pixel_measurements(lambda x, y: (1e-10 + 0 * x, 2e-10 + 0 * y), arr, noise=0)
        img = reconstruct_force_image(arr, overlapping=True)
        assert img.forces.shape == (3, 3, 2)
        # odd windows mix the offset pattern but still span both directions
        assert np.allclose(img.forces[..., 0], 1e-10) and np.allclose(img.forces[..., 1], 2e-10)

    def test_pixel_noise_matches_eta(self):
        gain = responsivity(PILLAR, W / 2)
        assert pixel_noise() / gain == pytest.approx(shot_noise_sensitivity(gain), rel=1e-12)

    @settings(max_examples=30)
    @given(fx=st.floats(-1e-9, 1e-9), fy=st.floats(-1e-9, 1e-9))
    def test_inversion_is_left_inverse(self, fx, fy):
        arr = _array(2, 2)
        simulate_pixel_measurements(lambda x, y: (fx + 0 * x, fy + 0 * y), arr, noise=0)
        img = reconstruct_force_image(arr)
        assert np.allclose(img.forces[0, 0], [fx, fy], rtol=1e-12, atol=1e-24)
