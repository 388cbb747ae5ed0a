"""Model wiring tests: shapes, weight sharing, volume alignment probes,
variant structure, and end-to-end gradient reach."""

import numpy as np
import pytest

import stereobev.autodiff as ad
from stereobev import scenesim as sim
from stereobev.geometry import GroundPlane, LayoutSpec, StereoRig
from stereobev.network import (
    ModelConfig, SbevModel, channels_to_height, height_to_channels,
    pseudo_lidar_bev,
)

# a small-but-real configuration to keep these tests quick
RIG = StereoRig(f=60.0, c_x=32.0, c_y=24.0, t_x=0.5, image_w=64, image_h=48)
PLANE = GroundPlane(0.0, 0.0, 1.5)
LAYOUT = LayoutSpec(-8.0, 8.0, 2.0, 14.0, 16, 16, 5)


def small_config(variant="full", **kw):
    base = dict(channels=6, feat_downsample=4, planes=8, max_disparity=16.0,
                volume_channels=4, reduced_channels=10, distill_channels=4,
                unet_width=6, unet_depth=3, variant=variant, n_classes=5)
    base.update(kw)
    return ModelConfig(**base)


def build(variant="full", seed=0, **kw):
    return SbevModel(small_config(variant, **kw), RIG, PLANE, LAYOUT, seed=seed)


def rand_pair(seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(3, 48, 64)), rng.uniform(size=(3, 48, 64))


class TestExtractor:
    def test_output_shape(self):
        m = build()
        f = m.extract_features(ad.tensor(rand_pair()[0][None]))
        assert f.data.shape == (1, 6, 12, 16)

    def test_divisibility_rejected_at_construction(self):
        rig = StereoRig(f=60.0, c_x=31.0, c_y=23.0, t_x=0.5, image_w=63, image_h=48)
        with pytest.raises(ValueError, match="divisible"):
            SbevModel(small_config(), rig, PLANE, LAYOUT)

    def test_shared_weights_same_output(self):
        m = build()
        img = ad.tensor(rand_pair()[0][None])
        a = m.extract_features(img)
        b = m.extract_features(img)
        assert np.array_equal(a.data, b.data)

    def test_shift_covariance(self):
        # shifting the input by the full downsample moves features one cell
        m = build()
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(1, 3, 48, 64))
        shifted = np.roll(img, 4, axis=3)
        fa = m.extract_features(ad.tensor(img)).data[0]
        fb = m.extract_features(ad.tensor(shifted)).data[0]
        a = fa[:, 2:-2, 2:-2]
        b = fb[:, 2:-2, 3:-1]
        corr = np.corrcoef(a.ravel(), b.ravel())[0, 1]
        assert corr >= 0.9

    def test_target_path_grads_accumulate_into_shared_tensors(self):
        m = build()
        left, right = rand_pair(1)
        w = m.params["extractor.conv_in.weight"]

        ad.zero_grads(m.params)
        ad.reset_graph()
        ad.backward(ad.tsum(m.extract_features(ad.tensor(left[None]))))
        g_ref = w.grad.copy()

        ad.zero_grads(m.params)
        ad.reset_graph()
        ad.backward(ad.tsum(m.extract_features(ad.tensor(right[None]))))
        g_tgt = w.grad.copy()

        ad.zero_grads(m.params)
        ad.reset_graph()
        both = ad.add(ad.tsum(m.extract_features(ad.tensor(left[None]))),
                      ad.tsum(m.extract_features(ad.tensor(right[None]))))
        ad.backward(both)
        assert np.allclose(w.grad, g_ref + g_tgt, atol=1e-10)


class TestFeatureVolume:
    def test_plane0_is_unshifted_concat(self):
        m = build()
        rng = np.random.default_rng(4)
        fr = ad.tensor(rng.normal(size=(1, 6, 12, 16)))
        ft = ad.tensor(rng.normal(size=(1, 6, 12, 16)))
        v = m.build_feature_volume(fr, ft)
        assert v.data.shape == (1, 12, 8, 12, 16)
        assert np.array_equal(v.data[:, :6, 0], fr.data)
        assert np.array_equal(v.data[:, 6:, 0], ft.data)

    def test_last_plane_zero_columns(self):
        m = build()
        rng = np.random.default_rng(5)
        fr = ad.tensor(rng.normal(size=(1, 6, 12, 16)))
        ft = ad.tensor(np.abs(rng.normal(size=(1, 6, 12, 16))) + 0.1)
        v = m.build_feature_volume(fr, ft)
        shift = (m.config.planes - 1) * m.config.disp_step_feat
        nz = int(np.ceil(shift))
        tail = v.data[:, 6:, -1]  # shifted half of the last plane
        assert np.array_equal(tail[..., :nz], np.zeros_like(tail[..., :nz]))
        assert (tail[..., nz:] != 0).all()

    def test_wall_correlation_peaks_at_true_plane(self):
        # textured fronto-parallel wall at a depth whose disparity sits exactly
        # on a volume plane; that plane must maximize left/right correlation
        cfg = small_config()
        m = SbevModel(cfg, RIG, PLANE, LAYOUT, seed=9)
        z = RIG.f * RIG.t_x / 6.0  # disparity 6 px -> plane 3 (step 2 px)
        wall = sim.Box(sim.BUILDING, 0.0, z + 1.0, 30.0, 2.0, 8.0, 0.0, (0.5, 0.45, 0.4))
        scene = sim.SceneSpec(sim.GROUND, [wall], [], texture_seed=31)
        left, right, _ = sim.render_stereo(scene, RIG, PLANE)
        with ad.no_grad():
            fr = m.extract_features(ad.tensor(left[None]))
            ft = m.extract_features(ad.tensor(right[None]))
            v = m.build_feature_volume(fr, ft).data[0]
        c = fr.data.shape[1]
        scores = []
        for k in range(cfg.planes):
            a = v[:c, k, 2:-2, 3:-3]
            b = v[c:, k, 2:-2, 3:-3]
            scores.append(np.corrcoef(a.ravel(), b.ravel())[0, 1])
        true_plane = int(round(6.0 / cfg.disp_step))
        assert int(np.argmax(scores)) == true_plane, scores


class TestRefiner:
    def test_shape_preserving(self):
        m = build()
        v = ad.tensor(np.random.default_rng(20).normal(size=(1, 12, 8, 12, 16)))
        out = m.refine_volume(v)
        assert out.data.shape == (1, 4, 8, 12, 16)

    def test_zero_input_bias_determined(self):
        m = build(seed=4)
        zeros = ad.tensor(np.zeros((1, 12, 8, 12, 16)))
        a = m.refine_volume(zeros).data
        b = m.refine_volume(ad.tensor(np.zeros((1, 12, 8, 12, 16)))).data
        assert np.array_equal(a, b)  # input-independent, parameters decide
        for name, p in m.params.items():
            if name.startswith("refiner") and name.endswith(".bias"):
                p.data[:] = 0.0
        assert np.array_equal(m.refine_volume(zeros).data, np.zeros_like(a))


class TestReduction:
    def test_fold_is_pure_permutation(self):
        rng = np.random.default_rng(6)
        v = ad.tensor(rng.normal(size=(1, 4, 8, 12, 16)))
        flat = height_to_channels(v)
        assert flat.data.shape == (1, 4 * 12, 8, 16)
        assert np.abs(flat.data).sum() == pytest.approx(np.abs(v.data).sum(), abs=0)
        assert sorted(flat.data.ravel()) == sorted(v.data.ravel())

    def test_fold_inverse_recovers_exactly(self):
        rng = np.random.default_rng(7)
        v = ad.tensor(rng.normal(size=(1, 4, 8, 12, 16)))
        back = channels_to_height(height_to_channels(v), c=4, h=12)
        assert np.array_equal(back.data, v.data)

    def test_reduced_shape(self):
        m = build()
        rng = np.random.default_rng(8)
        vr = ad.tensor(rng.normal(size=(1, 4, 8, 12, 16)))
        out = m.reduce_volume(vr)
        assert out.data.shape == (1, 10, 8, 16)


class TestStereoBev:
    def test_constant_volume_constant_on_valid(self):
        m = build()
        rv = ad.tensor(np.full((1, 10, 8, 16), 2.5))
        out = m.stereo_bev(rv).data[0, 0]
        valid = m.stereo_grid.valid
        # interior valid cells (full bilinear support) reproduce the constant
        interior = valid & (m.stereo_grid.coords[..., 0] >= 1) & \
            (m.stereo_grid.coords[..., 0] <= 14) & (m.stereo_grid.coords[..., 1] >= 1) & \
            (m.stereo_grid.coords[..., 1] <= 6)
        assert np.allclose(out[interior], 2.5)
        assert np.array_equal(out[~valid], np.zeros_like(out[~valid]))

    def test_dim_mismatch_rejected(self):
        m = build()
        with pytest.raises(ValueError, match="does not match"):
            m.stereo_bev(ad.tensor(np.zeros((1, 10, 9, 16))))

    def test_gradient_reaches_extractor(self):
        m = build()
        left, right = rand_pair(2)
        ad.zero_grads(m.params)
        ad.reset_graph()
        r_stereo, _ = m._stereo_map(ad.tensor(left[None]), ad.tensor(right[None]))
        ad.backward(ad.tsum(ad.mul(r_stereo, r_stereo)))
        g = m.params["extractor.conv_in.weight"].grad
        assert g is not None and np.abs(g).max() > 0


class TestVariants:
    @pytest.mark.parametrize("variant", ["stereo_only", "stereo_rgb_ipm",
                                         "stereo_feat_ipm", "full", "cmd"])
    def test_logits_shape(self, variant):
        m = build(variant)
        left, right = rand_pair(3)
        with ad.no_grad():
            out = m.forward(left, right)
        assert out.data.shape == (5, 16, 16)

    def test_baseline_shapes(self):
        m = build("pseudo_lidar")
        planes = np.random.default_rng(0).uniform(size=(5, 16, 16))
        with ad.no_grad():
            assert m.forward_pseudo_lidar(planes).data.shape == (5, 16, 16)
        m2 = build("ipm_only")
        with ad.no_grad():
            assert m2.forward_ipm_only(rand_pair()[0]).data.shape == (5, 16, 16)

    def test_variant_input_mismatch_rejected(self):
        with pytest.raises(ValueError, match="projected inputs"):
            build("pseudo_lidar").forward(*rand_pair())
        with pytest.raises(ValueError, match="not cmd"):
            build("full").forward_cmd_training(*rand_pair())
        with pytest.raises(ValueError, match="variant"):
            build("full").forward_ipm_only(rand_pair()[0])

    def test_cmd_inference_ignores_ipm_garbage(self):
        m = build("cmd", seed=5)
        left, right = rand_pair(4)
        with ad.no_grad():
            a = m.forward(left, right).data.copy()
        m.ipm_img_grid.coords[:] = np.nan
        m.ipm_feat_grid.coords[:] = np.nan
        with ad.no_grad():
            b = m.forward(left, right).data
        assert np.array_equal(a, b)

    def test_cmd_training_returns_triple(self):
        m = build("cmd")
        left, right = rand_pair(5)
        ls, li, lkt = m.forward_cmd_training(left, right)
        assert ls.data.shape == (5, 16, 16) and li.data.shape == (5, 16, 16)
        assert lkt.data.size == 1

    def test_full_is_stereo_only_plus_ipm_channels(self):
        # structurally, full only widens the head input by the IPM channels
        mf = build("full")
        ms = build("stereo_only")
        cf = mf.params["unet.enc0a.weight"].data.shape[1]
        cs = ms.params["unet.enc0a.weight"].data.shape[1]
        assert cf == cs + mf.config.channels + 3
        rest_f = {k: v.data.shape for k, v in mf.params.items() if k != "unet.enc0a.weight"}
        rest_s = {k: v.data.shape for k, v in ms.params.items() if k != "unet.enc0a.weight"}
        assert rest_f == rest_s

    def test_forward_deterministic(self):
        m = build("full", seed=3)
        left, right = rand_pair(6)
        with ad.no_grad():
            a = m.forward(left, right).data
            b = m.forward(left, right).data
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("variant", ["stereo_only", "stereo_rgb_ipm",
                                         "stereo_feat_ipm", "full", "cmd",
                                         "pseudo_lidar", "ipm_only"])
    def test_grads_reach_nearly_all_parameters(self, variant):
        m = build(variant, seed=1)
        rng = np.random.default_rng(7)
        target = rng.integers(0, 5, size=(16, 16))
        mask = np.ones((16, 16))
        left, right = rand_pair(7)
        ad.zero_grads(m.params)
        ad.reset_graph()
        if variant == "cmd":
            ls, li, lkt = m.forward_cmd_training(left, right)
            loss = ad.add(ad.add(ad.masked_softmax_ce(ls, target, mask),
                                 ad.masked_softmax_ce(li, target, mask)), lkt)
        elif variant == "pseudo_lidar":
            planes = rng.uniform(size=(5, 16, 16))
            loss = ad.masked_softmax_ce(m.forward_pseudo_lidar(planes), target, mask)
        elif variant == "ipm_only":
            loss = ad.masked_softmax_ce(m.forward_ipm_only(left), target, mask)
        else:
            loss = ad.masked_softmax_ce(m.forward(left, right), target, mask)
        ad.backward(loss)
        touched = [name for name, p in m.params.items()
                   if p.grad is not None and np.abs(p.grad).max() > 0]
        assert len(touched) >= 0.95 * len(m.params), (
            sorted(set(m.params) - set(touched)))


class TestIpmBranch:
    def test_cells_above_horizon_zero(self):
        m = build()
        left, _ = rand_pair(8)
        with ad.no_grad():
            r_img, _ = m.ipm_branch(ad.tensor(left[None]),
                                    ad.tensor(np.ones((1, 6, 12, 16))))
        invalid = ~m.ipm_img_grid.valid
        assert np.array_equal(r_img.data[0][:, invalid], np.zeros((3, invalid.sum())))

    def test_road_strip_round_trip(self):
        # IPM of a rendered road must land inside the road's GT footprint
        scene = sim.SceneSpec(
            sim.GROUND, [], [sim.Strip(sim.ROAD, -3.0, 3.0, -10.0, 40.0)], texture_seed=2)
        left, _, _ = sim.render_stereo(scene, RIG, PLANE)
        m = build()
        with ad.no_grad():
            warped = m.forward_ipm_only if False else None
            r_img = ad.grid_sample_bilinear(ad.tensor(left[None]),
                                            m.ipm_img_grid.grid_tensor()).data[0]
        gt = sim.gt_layout(scene, LAYOUT)
        valid = m.ipm_img_grid.valid
        # classify warped pixels as road when near the asphalt palette
        dist_road = np.abs(r_img - sim.PALETTE[sim.ROAD][:, None, None]).sum(axis=0)
        dist_ground = np.abs(r_img - sim.PALETTE[sim.GROUND][:, None, None]).sum(axis=0)
        pred_road = (dist_road < dist_ground) & valid
        inter = (pred_road & (gt == sim.ROAD) & valid).sum()
        union = ((pred_road | (gt == sim.ROAD)) & valid).sum()
        assert inter / union >= 0.8


class TestPseudoLidar:
    def test_single_pixel_on_axis(self):
        depth = np.full((48, 64), np.inf)
        classes = np.full((48, 64), sim.SKY_CLASS, dtype=np.int16)
        depth[24, 32] = 8.0  # optical axis, 8 m
        classes[24, 32] = sim.CAR
        planes = pseudo_lidar_bev(depth, classes, RIG, LAYOUT)
        bx, by = LAYOUT.center_mesh()
        iy = int((8.0 - LAYOUT.y_min) // LAYOUT.cell_d)
        ix = int((0.0 - LAYOUT.x_min) // LAYOUT.cell_w)
        assert planes[sim.CAR, iy, ix] == 1.0
        assert planes.sum() == 1.0

    def test_ground_wedge_covered_on_empty_scene(self):
        scene = sim.SceneSpec(sim.GROUND, [], [], texture_seed=0)
        view = sim.render_view(scene, RIG, PLANE)
        planes = pseudo_lidar_bev(view.depth, view.classes, RIG, LAYOUT)
        vis = sim.visibility_mask(np.full((16, 16), sim.GROUND, np.int16), LAYOUT,
                                  fov_deg=RIG.horizontal_fov_deg)
        covered = planes[sim.GROUND] > 0
        # most of the nearer half of the wedge receives splats
        near = vis.astype(bool) & (LAYOUT.center_mesh()[1] < 10.0)
        assert covered[near].mean() > 0.9

    def test_invalid_depth_ignored(self):
        depth = np.zeros((48, 64))
        classes = np.zeros((48, 64), dtype=np.int16)
        planes = pseudo_lidar_bev(depth, classes, RIG, LAYOUT)
        assert planes.sum() == 0.0
