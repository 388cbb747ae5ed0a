"""Geometry oracles: algebraic round trips, ray-plane vs homography
cross-checks, grid validity, and the forward-splat warp reference."""

import numpy as np
import pytest

import stereobev.autodiff as ad
from stereobev.errors import HorizonError
from stereobev.geometry import (
    GroundPlane, LayoutSpec, SamplingGrid, StereoRig,
    bev_to_disparity, disparity_to_bev, homography_ground_to_image,
    ipm_pixel_to_ground, make_ipm_grid, make_stereo_bev_grid,
)

RIG = StereoRig(f=100.0, c_x=64.0, c_y=48.0, t_x=0.5, image_w=128, image_h=96)
FLAT = GroundPlane(a=0.0, b=0.0, c=1.5)


class TestDisparityBev:
    def test_centered_pixel(self):
        x, y = disparity_to_bev(64.0, 10.0, RIG)
        assert x == 0.0 and y == 5.0

    def test_direct_substitution(self):
        x, y = disparity_to_bev(84.0, 5.0, RIG)
        assert abs(x - 2.0) <= 1e-15 and abs(y - 10.0) <= 1e-15

    def test_inverse_example(self):
        u, d = bev_to_disparity(0.0, 5.0, RIG)
        assert u == 64.0 and d == 10.0

    def test_45_degree_ray(self):
        u, _ = bev_to_disparity(7.3, 7.3, RIG)
        assert abs(u - (RIG.c_x + RIG.f)) <= 1e-12

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        u = rng.uniform(0, 128, size=10_000)
        d = rng.uniform(0.1, 64, size=10_000)
        x, y = disparity_to_bev(u, d, RIG)
        u2, d2 = bev_to_disparity(x, y, RIG)
        assert np.abs(u2 - u).max() <= 1e-12
        assert np.abs(d2 - d).max() <= 1e-12

    def test_depth_monotone_in_disparity(self):
        d = np.linspace(0.5, 60, 200)
        _, y = disparity_to_bev(64.0, d, RIG)
        assert (np.diff(y) < 0).all()

    def test_invalid_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            disparity_to_bev(10.0, 0.0, RIG)
        with pytest.raises(ValueError, match="positive"):
            bev_to_disparity(1.0, -2.0, RIG)


class TestIpm:
    def test_flat_ground_closed_form(self):
        x, y = ipm_pixel_to_ground(64.0, 78.0, RIG, FLAT)
        assert abs(x) <= 1e-12
        assert abs(y - 5.0) <= 1e-12  # 100 * 1.5 / 30

    def test_flat_ground_reduction_random(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            u = rng.uniform(0, 127)
            v = rng.uniform(49, 95)
            x, y = ipm_pixel_to_ground(u, v, RIG, FLAT)
            assert abs(x - FLAT.c * (u - RIG.c_x) / (v - RIG.c_y)) <= 1e-12
            assert abs(y - FLAT.c * RIG.f / (v - RIG.c_y)) <= 1e-12

    def test_horizon_pixels_rejected(self):
        for v in (48.0, 40.0, 10.0):
            with pytest.raises(HorizonError):
                ipm_pixel_to_ground(64.0, v, RIG, FLAT)

    def test_reprojection_oracle(self):
        # push the ground hit back through the pinhole model; must recover (u, v)
        rng = np.random.default_rng(2)
        for _ in range(10_000):
            plane = GroundPlane(a=rng.uniform(-0.05, 0.05), b=rng.uniform(-0.05, 0.05),
                                c=rng.uniform(1.0, 2.5))
            u = rng.uniform(0, 127)
            v = rng.uniform(55, 95)
            try:
                x, y = ipm_pixel_to_ground(u, v, RIG, plane)
            except HorizonError:
                continue
            z_drop = plane.a * x + plane.b * y + plane.c  # height of camera above point
            u2 = RIG.c_x + RIG.f * x / y
            v2 = RIG.c_y + RIG.f * z_drop / y
            assert abs(u2 - u) <= 1e-9 and abs(v2 - v) <= 1e-9


class TestHomography:
    def test_forward_line_symmetry(self):
        h = homography_ground_to_image(RIG, FLAT)
        for y in (2.0, 5.0, 17.0, 40.0):
            uvw = h @ np.array([0.0, y, 1.0])
            assert abs(uvw[0] / uvw[2] - RIG.c_x) <= 1e-12

    def test_agrees_with_ray_plane_on_lattice(self):
        for plane in (FLAT, GroundPlane(a=0.03, b=-0.02, c=1.8)):
            h = homography_ground_to_image(RIG, plane)
            hinv = np.linalg.inv(h)
            us = np.linspace(2, 126, 32)
            vs = np.linspace(60, 94, 32)
            for u in us:
                for v in vs:
                    x, y = ipm_pixel_to_ground(float(u), float(v), RIG, plane)
                    uvw = h @ np.array([x, y, 1.0])
                    assert abs(uvw[0] / uvw[2] - u) <= 1e-9
                    assert abs(uvw[1] / uvw[2] - v) <= 1e-9
                    # and the inverse homography recovers the ground point
                    xyw = hinv @ np.array([u, v, 1.0])
                    assert abs(xyw[0] / xyw[2] - x) <= 1e-9
                    assert abs(xyw[1] / xyw[2] - y) <= 1e-9

    def test_scale_invariance(self):
        h = homography_ground_to_image(RIG, FLAT)
        p = np.array([3.0, 12.0, 1.0])
        for lam in (2.0, -0.7, 1e3):
            a = h @ p
            b = (lam * h) @ p
            assert np.allclose(a[:2] / a[2], b[:2] / b[2], atol=1e-12)


LAYOUT = LayoutSpec(x_min=-8.0, x_max=8.0, y_min=2.0, y_max=18.0,
                    n_x=16, n_y=16, n_classes=5)


class TestStereoGrid:
    def test_plane_alignment(self):
        # choose a layout whose cell centers include (0, f*t_x / (step*k))
        disp_step = 1.0
        k = 5
        y_target = RIG.f * RIG.t_x / (disp_step * k)  # 10 m
        lay = LayoutSpec(x_min=-4.0, x_max=4.0, y_min=y_target - 0.5, y_max=y_target + 0.5,
                         n_x=8, n_y=1, n_classes=5)
        grid = make_stereo_bev_grid(RIG, lay, vol_w=32, vol_d=16,
                                    feat_downsample=4, disp_step=disp_step)
        rows = grid.coords[..., 1][grid.valid]
        assert np.abs(rows - k).max() <= 1e-12

    def test_far_cells_beyond_max_disparity_invalid(self):
        disp_step, vol_d = 2.0, 8
        grid = make_stereo_bev_grid(RIG, LAYOUT, vol_w=32, vol_d=vol_d,
                                    feat_downsample=4, disp_step=disp_step)
        _, ys = LAYOUT.center_mesh()
        too_close = RIG.f * RIG.t_x / ys > disp_step * (vol_d - 1)
        assert not grid.valid[too_close].any()

    def test_rows_monotone_in_depth(self):
        grid = make_stereo_bev_grid(RIG, LAYOUT, vol_w=32, vol_d=64,
                                    feat_downsample=4, disp_step=1.0)
        rows = grid.coords[:, 8, 1]
        ok = grid.valid[:, 8]
        assert (np.diff(rows[ok]) < 0).all()  # deeper cells -> smaller disparity row

    def test_cells_valid_or_sentinel(self):
        grid = make_stereo_bev_grid(RIG, LAYOUT, vol_w=16, vol_d=8,
                                    feat_downsample=4, disp_step=1.5)
        assert np.isfinite(grid.coords[grid.valid]).all()
        assert (grid.coords[~grid.valid] <= -1e5).all()

    def test_one_hot_matches_forward_splat_oracle(self):
        rng = np.random.default_rng(3)
        grid = make_stereo_bev_grid(RIG, LAYOUT, vol_w=32, vol_d=24,
                                    feat_downsample=4, disp_step=1.0)
        for _ in range(10):
            vol = np.zeros((1, 1, 24, 32))
            r, c = rng.integers(0, 24), rng.integers(0, 32)
            vol[0, 0, r, c] = 1.0
            warped = ad.grid_sample_bilinear(ad.tensor(vol), grid.grid_tensor()).data[0, 0]
            ref = forward_splat(vol[0, 0], grid)
            assert np.abs(warped - ref).max() <= 1e-9


def forward_splat(vol, grid: SamplingGrid):
    """Brute-force reference: push every volume entry into all BEV cells whose
    source coordinate lies inside its bilinear support."""
    out = np.zeros(grid.shape)
    h, w = vol.shape
    nz = np.argwhere(vol != 0)
    for (r, c) in nz:
        for iy in range(grid.shape[0]):
            for ix in range(grid.shape[1]):
                col, row = grid.coords[iy, ix]
                wr = 1.0 - abs(row - r)
                wc = 1.0 - abs(col - c)
                if wr > 0 and wc > 0:
                    out[iy, ix] += vol[r, c] * wr * wc
    return out


class TestIpmGrid:
    def test_forward_line_column(self):
        lay = LayoutSpec(x_min=-0.5, x_max=0.5, y_min=3.0, y_max=15.0,
                         n_x=1, n_y=12, n_classes=5)
        for ds in (1, 4):
            grid = make_ipm_grid(RIG, FLAT, lay, src_w=128 // ds, src_h=96 // ds,
                                 src_downsample=ds)
            cols = grid.coords[..., 0][grid.valid]
            assert np.abs(cols - RIG.c_x / ds).max() <= 1e-12

    def test_cells_behind_camera_invalid(self):
        lay = LayoutSpec(x_min=-4.0, x_max=4.0, y_min=-6.0, y_max=6.0,
                         n_x=4, n_y=12, n_classes=5)
        grid = make_ipm_grid(RIG, FLAT, lay, src_w=128, src_h=96, src_downsample=1)
        _, ys = lay.center_mesh()
        assert not grid.valid[ys <= 0].any()

    def test_horizon_cells_invalid_far_ahead(self):
        # at great depth the projected v approaches the horizon row c_y;
        # cells still map inside the image here, but rows must decrease toward c_y
        grid = make_ipm_grid(RIG, FLAT, LAYOUT, src_w=128, src_h=96, src_downsample=1)
        rows = grid.coords[:, 8, 1]
        ok = grid.valid[:, 8]
        assert (np.diff(rows[ok]) < 0).all()
        assert (rows[ok] > RIG.c_y).all()

    def test_checkerboard_straightens(self):
        # analytic flat-ground checkerboard image -> IPM -> axis-parallel checks
        square = 2.0
        us, vs = np.meshgrid(np.arange(128, dtype=float), np.arange(96, dtype=float))
        denom = vs - RIG.c_y
        img = np.zeros((1, 1, 96, 128))
        below = denom > 2.0  # comfortably under the horizon
        gx = FLAT.c * (us - RIG.c_x) / np.where(below, denom, 1.0)
        gy = FLAT.c * RIG.f / np.where(below, denom, 1.0)
        parity = (np.floor(gx / square) + np.floor(gy / square)) % 2
        img[0, 0] = np.where(below, parity, 0.5)
        lay = LayoutSpec(x_min=-6.0, x_max=6.0, y_min=4.0, y_max=10.0,
                         n_x=24, n_y=12, n_classes=5)
        grid = make_ipm_grid(RIG, FLAT, lay, src_w=128, src_h=96, src_downsample=1)
        warped = ad.grid_sample_bilinear(ad.tensor(img), grid.grid_tensor()).data[0, 0]
        bx, by = lay.center_mesh()
        want = (np.floor(bx / square) + np.floor(by / square)) % 2
        # compare away from checker edges: cell centers > 1 cell from any edge
        dx = np.minimum(bx % square, square - bx % square)
        dy = np.minimum(by % square, square - by % square)
        interior = grid.valid & (dx > lay.cell_w) & (dy > lay.cell_d)
        assert interior.sum() > 50
        assert np.abs(warped[interior] - want[interior]).max() < 0.35


class TestValidation:
    def test_rig_invariants(self):
        with pytest.raises(ValueError):
            StereoRig(f=-1, c_x=64, c_y=48, t_x=0.5, image_w=128, image_h=96)
        with pytest.raises(ValueError):
            StereoRig(f=100, c_x=200, c_y=48, t_x=0.5, image_w=128, image_h=96)

    def test_plane_invariants(self):
        with pytest.raises(ValueError):
            GroundPlane(a=0, b=0, c=-1.0)
        with pytest.raises(ValueError):
            GroundPlane(a=1.5, b=0, c=1.0)

    def test_layout_invariants(self):
        with pytest.raises(ValueError):
            LayoutSpec(x_min=1, x_max=-1, y_min=0, y_max=1, n_x=4, n_y=4, n_classes=2)

    def test_grid_params_validated(self):
        with pytest.raises(ValueError, match="disp_step"):
            make_stereo_bev_grid(RIG, LAYOUT, 16, 8, 4, 0.0)
        with pytest.raises(ValueError, match="src_downsample"):
            make_ipm_grid(RIG, FLAT, LAYOUT, 128, 96, 0)
