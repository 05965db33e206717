import math

import numpy as np
import pytest
from scipy import ndimage

from surgsync.postprocess import (
    BehindCameraError,
    CameraIntrinsics,
    ContactConfig,
    HeatmapParams,
    RigidTransform,
    StereoParams,
    apply_rectification,
    attention_image,
    binarize_contact,
    contact_accuracy,
    count_transitions,
    disparity_to_depth,
    flow_magnitude,
    flow_magnitude_filter,
    gaussian_heatmap,
    laplacian_variance,
    project_point,
    to_grayscale,
)
from surgsync.streams import ImageFrame


class TestRigidTransform:
    def test_identity(self):
        t = RigidTransform.identity()
        assert np.array_equal(t.apply([1.0, -2.0, 3.0]), [1.0, -2.0, 3.0])

    def test_rotation_about_z(self):
        r = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        t = RigidTransform(r, np.array([0.0, 0.0, 0.5]))
        out = t.apply([1.0, 0.0, 0.0])
        assert np.allclose(out, [0.0, 1.0, 0.5], atol=1e-15)

    def test_compose_applies_right_operand_first(self):
        rz = RigidTransform(
            np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
            np.zeros(3),
        )
        shift = RigidTransform(np.eye(3), np.array([1.0, 0.0, 0.0]))
        combined = rz.compose(shift)
        # shift then rotate: (0,0,0) -> (1,0,0) -> (0,1,0)
        assert np.allclose(combined.apply([0.0, 0.0, 0.0]), [0.0, 1.0, 0.0])

    def test_inverse_round_trip(self):
        angle = 0.3
        r = np.array(
            [
                [math.cos(angle), -math.sin(angle), 0.0],
                [math.sin(angle), math.cos(angle), 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        t = RigidTransform(r, np.array([0.1, -0.2, 0.7]))
        p = np.array([0.4, 0.5, 1.2])
        assert np.allclose(t.inverse().apply(t.apply(p)), p, atol=1e-12)

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError, match="orthonormal"):
            RigidTransform(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_reflection(self):
        flip = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError, match="proper"):
            RigidTransform(flip, np.zeros(3))

    def test_dict_round_trip(self):
        t = RigidTransform(np.eye(3), np.array([1.0, 2.0, 3.0]))
        back = RigidTransform.from_dict(t.to_dict())
        assert np.array_equal(back.rotation, t.rotation)
        assert np.array_equal(back.translation, t.translation)


class TestProjection:
    INTR = CameraIntrinsics(fx=100.0, fy=200.0, cx=320.0, cy=240.0)

    def test_known_point(self):
        u, v = project_point((0.5, -0.25, 2.0), self.INTR)
        assert u == 320.0 + 100.0 * 0.25
        assert v == 240.0 - 200.0 * 0.125

    def test_principal_ray(self):
        assert project_point((0.0, 0.0, 1.0), self.INTR) == (320.0, 240.0)

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project_point((0.0, 0.0, 0.0), self.INTR)
        with pytest.raises(BehindCameraError):
            project_point((1.0, 1.0, -0.5), self.INTR)

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=0.0, fy=1.0, cx=0.0, cy=0.0)


class TestHeatmap:
    def test_matches_scalar_oracle(self):
        params = HeatmapParams(sigma_x=2.0, sigma_y=3.0)
        u, v = 10.3, 5.7
        heat = gaussian_heatmap((12, 20), (u, v), params)
        for py in range(12):
            for px in range(20):
                want = math.exp(
                    -((px - u) ** 2 / params.sigma_x**2 + (py - v) ** 2 / params.sigma_y**2)
                )
                assert heat[py, px] == pytest.approx(want, rel=0, abs=1e-12)

    def test_peak_is_one_at_integer_center(self):
        heat = gaussian_heatmap((12, 20), (10.0, 5.0), HeatmapParams(2.0, 3.0))
        assert heat[5, 10] == 1.0

    def test_no_half_factor_in_exponent(self):
        # one sigma from center must give e^-1, not e^-0.5
        heat = gaussian_heatmap((12, 20), (10.0, 5.0), HeatmapParams(2.0, 3.0))
        assert heat[5, 12] == pytest.approx(math.exp(-1.0), rel=0, abs=1e-12)
        assert abs(heat[5, 12] - math.exp(-0.5)) > 0.2
        assert heat[8, 10] == pytest.approx(math.exp(-1.0), rel=0, abs=1e-12)

    def test_center_may_be_outside(self):
        heat = gaussian_heatmap((4, 4), (-3.0, 10.0), HeatmapParams(1.0, 1.0))
        assert heat.shape == (4, 4)
        assert float(heat.max()) < 1e-3

    def test_param_validation(self):
        with pytest.raises(ValueError):
            HeatmapParams(0.0, 1.0)
        with pytest.raises(ValueError):
            gaussian_heatmap((0, 4), (0, 0), HeatmapParams(1.0, 1.0))


class TestGrayscaleAndAttention:
    def test_luma_weights_exact(self):
        img = np.zeros((1, 1, 3), dtype=np.uint8)
        img[0, 0] = (100, 50, 200)
        gray = to_grayscale(img)
        assert gray.dtype == np.float64
        assert gray[0, 0] == 0.299 * 100 + 0.587 * 50 + 0.114 * 200

    def test_accepts_image_frame(self):
        data = np.full((4, 6, 3), 10, dtype=np.uint8)
        frame = ImageFrame(width=6, height=4, channels=3, data=data)
        gray = to_grayscale(frame)
        assert gray.shape == (4, 6)
        assert np.all(gray == 0.299 * 10 + 0.587 * 10 + 0.114 * 10)

    def test_single_channel_passthrough(self):
        g2 = to_grayscale(np.full((3, 3), 7, dtype=np.uint8))
        g3 = to_grayscale(np.full((3, 3, 1), 7, dtype=np.uint8))
        assert np.all(g2 == 7.0) and g2.shape == (3, 3)
        assert np.all(g3 == 7.0) and g3.shape == (3, 3)

    def test_attention_rounding_and_clamp(self):
        gray = np.array([[255.0, 253.0, 300.0, 10.0]])
        heat = np.array([[0.5, 0.5, 1.0, 0.0]])
        out = attention_image(gray, heat)
        assert out.dtype == np.uint8
        # 127.5 rounds to even 128, 126.5 rounds to even 126
        assert out.tolist() == [[128, 126, 255, 0]]

    def test_attention_shape_mismatch(self):
        with pytest.raises(ValueError):
            attention_image(np.zeros((2, 2)), np.zeros((2, 3)))


class TestDepth:
    STEREO = StereoParams(focal_px=700.0, baseline_m=0.004)

    def test_formula(self):
        disp = np.array([[2.0, 0.5], [7.0, 1.0]])
        depth = disparity_to_depth(disp, self.STEREO)
        want = 700.0 * 0.004 / disp
        assert np.array_equal(depth, want)

    def test_invalid_pixels_are_nan(self):
        disp = np.array([0.0, -1.0, 1e-7, 1e-6, 2.0])
        depth = disparity_to_depth(disp, self.STEREO)
        assert np.isnan(depth[0]) and np.isnan(depth[1]) and np.isnan(depth[2])
        assert depth[3] == 700.0 * 0.004 / 1e-6  # exactly eps counts as valid
        assert not np.isnan(depth[4])

    def test_params_validation(self):
        with pytest.raises(ValueError):
            StereoParams(focal_px=-1.0, baseline_m=0.004)


class TestSharpness:
    def test_constant_image_is_exactly_zero(self):
        assert laplacian_variance(np.full((8, 8), 91.0)) == 0.0

    def test_linear_ramp_is_exactly_zero(self):
        i, j = np.mgrid[0:10, 0:12]
        assert laplacian_variance((2.0 * i + 3.0 * j).astype(np.float64)) == 0.0

    def test_impulse_value(self):
        g = np.zeros((5, 5))
        g[2, 2] = 1.0
        # interior laplacian is [[0,1,0],[1,-4,1],[0,1,0]]: var = 20/9
        assert laplacian_variance(g) == pytest.approx(20.0 / 9.0, rel=0, abs=1e-12)

    def test_sharp_beats_blurred(self):
        tile = np.array([[0.0, 255.0], [255.0, 0.0]])
        board = np.tile(tile, (8, 8))
        blurred = ndimage.gaussian_filter(board, sigma=2.0)
        assert laplacian_variance(board) >= 10.0 * laplacian_variance(blurred)

    def test_too_small(self):
        with pytest.raises(ValueError):
            laplacian_variance(np.zeros((2, 5)))


class TestFlow:
    def test_threshold_zeroes_small_vectors(self):
        flow = np.zeros((2, 2, 2))
        flow[0, 0] = (0.3, 0.4)  # magnitude 0.5
        flow[0, 1] = (0.0, 1.0)
        flow[1, 0] = (3.0, 4.0)  # magnitude 5
        flow[1, 1] = (2.0, 0.0)  # exactly tau: kept
        out = flow_magnitude_filter(flow, 2.0)
        assert np.array_equal(out[0, 0], [0.0, 0.0])
        assert np.array_equal(out[0, 1], [0.0, 0.0])
        assert np.array_equal(out[1, 0], [3.0, 4.0])
        assert np.array_equal(out[1, 1], [2.0, 0.0])
        # input untouched
        assert np.array_equal(flow[0, 0], [0.3, 0.4])

    def test_magnitude(self):
        flow = np.array([[[3.0, 4.0]]])
        assert flow_magnitude(flow)[0, 0] == 5.0

    def test_validation(self):
        with pytest.raises(ValueError):
            flow_magnitude_filter(np.zeros((2, 2)), 1.0)
        with pytest.raises(ValueError):
            flow_magnitude_filter(np.zeros((2, 2, 2)), -0.5)


class TestContact:
    def test_plain_threshold(self):
        raw = [100.0, 205.0, 204.9, 300.0, 10.0]
        assert binarize_contact(raw) == [False, True, False, True, False]

    def test_hysteresis_holds_state(self):
        cfg = ContactConfig(threshold=205.0, hysteresis=10.0)
        raw = [100.0, 205.0, 200.0, 194.0, 205.0, 196.0]
        # exit only below 195
        assert binarize_contact(raw, cfg) == [False, True, True, False, True, True]

    def test_exit_boundary_holds(self):
        cfg = ContactConfig(threshold=205.0, hysteresis=10.0)
        assert binarize_contact([205.0, 195.0], cfg) == [True, True]
        assert binarize_contact([205.0, 194.999], cfg) == [True, False]

    def test_starts_out_of_contact(self):
        cfg = ContactConfig(threshold=205.0, hysteresis=10.0)
        assert binarize_contact([200.0], cfg) == [False]

    def test_transitions_and_accuracy(self):
        states = [False, True, True, False, True]
        assert count_transitions(states) == 3
        truth = [False, True, False, False, True]
        assert contact_accuracy(states, truth) == 0.8
        with pytest.raises(ValueError):
            contact_accuracy([True], [True, False])
        with pytest.raises(ValueError):
            contact_accuracy([], [])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ContactConfig(hysteresis=-1.0)


class TestRectification:
    def _identity_maps(self, h, w):
        my, mx = np.mgrid[0:h, 0:w].astype(np.float64)
        return mx, my

    def test_identity_copies_interior(self):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 256, size=(6, 7), dtype=np.uint8)
        mx, my = self._identity_maps(6, 7)
        out = apply_rectification(img, mx, my)
        assert out.dtype == np.uint8
        assert np.array_equal(out[:-1, :-1], img[:-1, :-1])
        # the 2x2 support for the last row/column leaves the image
        assert np.all(out[-1, :] == 0) and np.all(out[:, -1] == 0)

    def test_integer_shift(self):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        mx, my = self._identity_maps(3, 4)
        out = apply_rectification(img, mx + 1.0, my)
        assert np.array_equal(out[:-1, :-2], img[:-1, 1:-1])
        assert np.all(out[:, -2:] == 0)

    def test_half_pixel_blend(self):
        img = np.array([[10.0, 30.0], [10.0, 30.0]])
        out = apply_rectification(img, np.array([[0.5]]), np.array([[0.0]]))
        assert out[0, 0] == 20.0

    def test_bilinear_corner_weights(self):
        img = np.array([[0.0, 10.0], [20.0, 40.0]])
        out = apply_rectification(img, np.array([[0.25]]), np.array([[0.5]]))
        top = 0.0 + (10.0 - 0.0) * 0.25
        bot = 20.0 + (40.0 - 20.0) * 0.25
        assert out[0, 0] == pytest.approx(top + (bot - top) * 0.5, rel=0, abs=1e-12)

    def test_out_of_bounds_zero(self):
        img = np.full((4, 4), 200, dtype=np.uint8)
        mx = np.array([[-1.0, 5.0, 1.0]])
        my = np.array([[1.0, 1.0, -0.5]])
        out = apply_rectification(img, mx, my)
        assert out.tolist() == [[0, 0, 0]]

    def test_color_channels(self):
        img = np.zeros((3, 3, 3), dtype=np.uint8)
        img[1, 1] = (10, 20, 30)
        mx, my = self._identity_maps(3, 3)
        out = apply_rectification(img, mx, my)
        assert out.shape == (3, 3, 3)
        assert out[1, 1].tolist() == [10, 20, 30]

    def test_float_input_not_rounded(self):
        img = np.array([[1.25, 2.75], [3.0, 4.0]])
        out = apply_rectification(img, np.array([[0.0]]), np.array([[0.0]]))
        assert out.dtype == np.float64
        assert out[0, 0] == 1.25

    def test_map_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_rectification(np.zeros((3, 3)), np.zeros((2, 2)), np.zeros((2, 3)))
