import numpy as np
import pytest

from skywind.errors import InputError
from skywind.imaging import LayerSpec, PixelGeometry, SceneSpec, ThermalFrame, synth_scene
from skywind.optflow import FlowField, WlkConfig, derivatives, to_metric, wlk

PAPER_CFG = WlkConfig(window_area=16, reg_tau=1e-8, kernel_sigma=1.0, frame_rate=1.0)


def frame(temps):
    return ThermalFrame(temps=np.asarray(temps, dtype=float))


def translation_frames(shift, seed=0, n=2):
    spec = SceneSpec(
        layers=(LayerSpec(velocity_px=shift, height_m=3000.0, texture_seed=seed),),
        n_frames=n,
        rows=60,
        cols=80,
    )
    frames, _, _ = synth_scene(spec)
    return frames


class TestDerivatives:
    def test_identical_frames_zero_temporal(self):
        f = translation_frames((1.0, 0.0))[0]
        _, _, it = derivatives(f, f, 1.0)
        np.testing.assert_allclose(it, 0.0, atol=1e-15)

    def test_horizontal_ramp_gradient(self):
        temps = 20000.0 + 100.0 * np.tile(np.arange(40.0), (30, 1))
        f = frame(temps)
        ix, iy, _ = derivatives(f, f, 1.0)
        # Pair normalization maps the ramp to [0, 1]; slope 1/(cols-1) per pixel.
        expected = 1.0 / 39.0
        np.testing.assert_allclose(ix[6:-6, 6:-6], expected, rtol=1e-9)
        np.testing.assert_allclose(iy[6:-6, 6:-6], 0.0, atol=1e-12)

    def test_bad_sigma_and_shape(self):
        f = translation_frames((1.0, 0.0))[0]
        with pytest.raises(InputError):
            derivatives(f, f, 0.0)
        other = frame(np.full((10, 10), 25000.0))
        with pytest.raises(InputError):
            derivatives(f, other, 1.0)


class TestWlk:
    def test_static_scene_zero_flow(self):
        f = translation_frames((1.0, 0.0))[0]
        ix, iy, it = derivatives(f, f, 1.0)
        u, v, _ = wlk(ix, iy, it, np.ones(f.shape), PAPER_CFG)
        np.testing.assert_allclose(u, 0.0, atol=1e-12)
        np.testing.assert_allclose(v, 0.0, atol=1e-12)

    def test_zero_weights_give_zero_velocity(self):
        f0, f1 = translation_frames((1.0, 0.0))
        ix, iy, it = derivatives(f0, f1, 1.0)
        u, v, _ = wlk(ix, iy, it, np.zeros(f0.shape), PAPER_CFG)
        np.testing.assert_allclose(u, 0.0, atol=1e-12)
        np.testing.assert_allclose(v, 0.0, atol=1e-12)

    def test_unit_shift_recovered_with_defaults(self):
        f0, f1 = translation_frames((1.0, 0.0))
        ix, iy, it = derivatives(f0, f1, PAPER_CFG.kernel_sigma)
        u, v, _ = wlk(ix, iy, it, np.ones(f0.shape), PAPER_CFG)
        interior = (slice(6, -6), slice(6, -6))
        assert abs(np.median(u[interior]) - 1.0) <= 0.1
        assert abs(np.median(v[interior])) <= 0.1

    @pytest.mark.parametrize(
        "shift", [(2.0, 0.0), (0.0, -2.0), (1.0, 1.0), (-2.0, 1.0), (0.5, -1.5)]
    )
    def test_translation_recovery_within_tolerance(self, shift):
        f0, f1 = translation_frames(shift, seed=3)
        ix, iy, it = derivatives(f0, f1, PAPER_CFG.kernel_sigma)
        u, v, _ = wlk(ix, iy, it, np.ones(f0.shape), PAPER_CFG)
        interior = (slice(6, -6), slice(6, -6))
        assert abs(np.median(u[interior]) - shift[0]) <= 0.1
        assert abs(np.median(v[interior]) - shift[1]) <= 0.1

    def test_linear_in_temporal_derivative(self):
        f0, f1 = translation_frames((1.0, 0.5), seed=5)
        ix, iy, it = derivatives(f0, f1, 1.0)
        w = np.ones(f0.shape)
        u1, v1, _ = wlk(ix, iy, it, w, PAPER_CFG)
        u2, v2, _ = wlk(ix, iy, 3.0 * it, w, PAPER_CFG)
        np.testing.assert_allclose(u2, 3.0 * u1, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(v2, 3.0 * v1, rtol=1e-9, atol=1e-12)

    def test_border_windows_not_low_confidence_at_16px(self):
        f0, f1 = translation_frames((1.0, 0.0))
        ix, iy, it = derivatives(f0, f1, 1.0)
        _, _, low = wlk(ix, iy, it, np.ones(f0.shape), PAPER_CFG)
        # A 4x4 window at a corner keeps 4/16 = 25% of its area.
        assert not low.any()


class TestToMetric:
    def make_flow(self, u=2.0, v=0.0, shape=(6, 8)):
        return FlowField(
            u_px=np.full((1,) + shape, u),
            v_px=np.full((1,) + shape, v),
            low_confidence=np.zeros(shape, dtype=bool),
        )

    def unit_geom(self, shape=(6, 8), dx=1.0, dy=1.0):
        return PixelGeometry(
            dx=np.full(shape, dx), dy=np.full(shape, dy), diag_fov=1.0
        )

    def test_identity_scaling(self):
        cfg = WlkConfig(frame_rate=1.0, vector_scale=1.0)
        flow = self.make_flow(u=2.0)
        gamma = np.ones((6, 8, 1))
        out = to_metric(flow, gamma, np.array([1.0]), self.unit_geom(), cfg)
        np.testing.assert_allclose(out.u_m, 2.0)
        np.testing.assert_allclose(out.v_m, 0.0)

    def test_linear_in_height_scale_rate_and_cell(self):
        gamma = np.ones((6, 8, 1))
        flow = self.make_flow(u=1.5, v=-0.5)
        base = to_metric(
            flow, gamma, np.array([1000.0]), self.unit_geom(),
            WlkConfig(frame_rate=2.0, vector_scale=1.0),
        )
        doubled_h = to_metric(
            flow, gamma, np.array([2000.0]), self.unit_geom(),
            WlkConfig(frame_rate=2.0, vector_scale=1.0),
        )
        np.testing.assert_allclose(doubled_h.u_m, 2.0 * base.u_m)
        scaled = to_metric(
            flow, gamma, np.array([1000.0]), self.unit_geom(),
            WlkConfig(frame_rate=2.0, vector_scale=2.29),
        )
        np.testing.assert_allclose(scaled.u_m, 2.29 * base.u_m)
        faster = to_metric(
            flow, gamma, np.array([1000.0]), self.unit_geom(),
            WlkConfig(frame_rate=4.0, vector_scale=1.0),
        )
        np.testing.assert_allclose(faster.u_m, 0.5 * base.u_m)
        wider = to_metric(
            flow, gamma, np.array([1000.0]), self.unit_geom(dx=3.0),
            WlkConfig(frame_rate=2.0, vector_scale=1.0),
        )
        np.testing.assert_allclose(wider.u_m, 3.0 * base.u_m)
        np.testing.assert_allclose(wider.v_m, base.v_m)

    def test_two_layer_sum_and_per_layer_grids(self):
        shape = (5, 5)
        flow = FlowField(
            u_px=np.stack([np.full(shape, 1.0), np.full(shape, -2.0)]),
            v_px=np.zeros((2,) + shape),
            low_confidence=np.zeros(shape, dtype=bool),
        )
        gamma = np.zeros(shape + (2,))
        gamma[..., 0] = 0.25
        gamma[..., 1] = 0.75
        cfg = WlkConfig(frame_rate=1.0, vector_scale=1.0)
        out = to_metric(flow, gamma, np.array([100.0, 10.0]), self.unit_geom(shape), cfg)
        expected_sum = 100.0 * 0.25 * 1.0 + 10.0 * 0.75 * (-2.0)
        np.testing.assert_allclose(out.u_m, expected_sum)
        np.testing.assert_allclose(out.u_m_layers[0], 25.0)
        np.testing.assert_allclose(out.u_m_layers[1], -15.0)

    def test_missing_heights_rejected(self):
        flow = self.make_flow()
        gamma = np.ones((6, 8, 1))
        with pytest.raises(InputError):
            to_metric(flow, gamma, np.array([]), self.unit_geom(), PAPER_CFG)
        with pytest.raises(InputError):
            to_metric(flow, gamma, np.array([np.nan]), self.unit_geom(), PAPER_CFG)
