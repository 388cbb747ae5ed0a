"""Model assembly: shared feature extractor, disparity feature volume,
3D refinement, height-to-channel reduction, the stereo BEV warp, the IPM
branch, U-Net heads, the distillation twin-head variant, and the two
geometric baselines.

A batch always has size 1 here; the trainer accumulates gradients across
samples instead of batching, which keeps every op shape static.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import io as dio
from .autodiff import Tensor
from .errors import DataError
from .geometry import (GroundPlane, LayoutSpec, StereoRig,
                       make_ipm_grid, make_stereo_bev_grid)

__all__ = [
    "VARIANTS", "ModelConfig", "SbevModel",
    "height_to_channels", "channels_to_height", "pseudo_lidar_bev",
    "save_checkpoint", "load_checkpoint",
]

VARIANTS = ("stereo_only", "stereo_rgb_ipm", "stereo_feat_ipm", "full", "cmd",
            "pseudo_lidar", "ipm_only")
STEREO_VARIANTS = ("stereo_only", "stereo_rgb_ipm", "stereo_feat_ipm", "full", "cmd")


@dataclass
class ModelConfig:
    channels: int = 16           # extractor output channels
    feat_downsample: int = 4
    planes: int = 20             # disparity planes in the feature volume
    max_disparity: float = 20.0  # full-resolution pixels
    volume_channels: int = 8     # 3D refiner width
    reduced_channels: int = 32   # channels after height reduction
    distill_channels: int = 8    # K channels tied between IPM and stereo maps
    unet_width: int = 16
    unet_depth: int = 3
    variant: str = "full"
    n_classes: int = 5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"ModelConfig: unknown variant {self.variant!r}, "
                             f"expected one of {VARIANTS}")
        if self.planes < 2:
            raise ValueError(f"ModelConfig: need at least 2 disparity planes, got {self.planes}")
        if not (1 <= self.distill_channels <= self.reduced_channels):
            raise ValueError(
                f"ModelConfig: distill_channels={self.distill_channels} must be in "
                f"[1, reduced_channels={self.reduced_channels}]")
        if self.variant == "cmd" and self.distill_channels > self.channels:
            raise ValueError(
                f"ModelConfig: cmd ties the first {self.distill_channels} channels but the "
                f"IPM feature map only has {self.channels}")
        if self.unet_depth < 1:
            raise ValueError("ModelConfig: unet_depth must be >= 1")

    @property
    def disp_step(self) -> float:
        """Full-resolution disparity pixels per volume plane."""
        return self.max_disparity / self.planes

    @property
    def disp_step_feat(self) -> float:
        """Feature-map pixels of horizontal shift per volume plane."""
        return self.max_disparity / (self.feat_downsample * self.planes)


# ---------------------------------------------------------------------------
# parameterized blocks

class _Conv2d:
    def __init__(self, params, rng, name, cin, cout, k, pad=None):
        self.pad = k // 2 if pad is None else pad
        self.weight = ad.he_uniform(rng, (cout, cin, k, k), cin * k * k, f"{name}.weight")
        self.bias = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")
        params[self.weight.name] = self.weight
        params[self.bias.name] = self.bias

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=1, pad=self.pad)


class _Conv3d:
    def __init__(self, params, rng, name, cin, cout, k, pad=None):
        self.pad = k // 2 if pad is None else pad
        self.weight = ad.he_uniform(rng, (cout, cin, k, k, k), cin * k ** 3, f"{name}.weight")
        self.bias = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")
        params[self.weight.name] = self.weight
        params[self.bias.name] = self.bias

    def __call__(self, x):
        return ad.conv3d(x, self.weight, self.bias, stride=1, pad=self.pad)


class _Extractor:
    """Shared-weight encoder, downsampling by 2 per pooling stage. The final
    conv is linear so features keep signed values."""

    def __init__(self, params, rng, name, cin, channels, downsample):
        n_pools = int(np.log2(downsample))
        if 2 ** n_pools != downsample:
            raise ValueError(f"extractor: feat_downsample must be a power of two, got {downsample}")
        self.n_pools = n_pools
        self.conv_in = _Conv2d(params, rng, f"{name}.conv_in", cin, channels, 3)
        self.stage = [_Conv2d(params, rng, f"{name}.stage{i}", channels, channels, 3)
                      for i in range(n_pools)]
        self.conv_mid = _Conv2d(params, rng, f"{name}.conv_mid", channels, channels, 3)
        self.conv_out = _Conv2d(params, rng, f"{name}.conv_out", channels, channels, 3)

    def __call__(self, x):
        h = ad.relu(self.conv_in(x))
        for conv in self.stage:
            h = ad.relu(conv(ad.maxpool2d(h)))
        h = ad.relu(self.conv_mid(h))
        return self.conv_out(h)


class _Refiner:
    """1x1x1 entry conv then two residual 3D blocks, shape-preserving."""

    def __init__(self, params, rng, name, cin, width):
        self.entry = _Conv3d(params, rng, f"{name}.entry", cin, width, 1)
        self.blocks = [(_Conv3d(params, rng, f"{name}.b{i}c1", width, width, 3),
                        _Conv3d(params, rng, f"{name}.b{i}c2", width, width, 3))
                       for i in range(2)]

    def __call__(self, v):
        h = ad.relu(self.entry(v))
        for c1, c2 in self.blocks:
            h = ad.relu(ad.add(c2(ad.relu(c1(h))), h))
        return h


class _Reducer:
    """Fold the feature-volume height into channels (pure permutation, no
    pooling) and mix down to the reduced width with stride-1 2D convs; the
    volume keeps its (planes, width) axes so the BEV warp calibration holds."""

    def __init__(self, params, rng, name, cin_folded, cout):
        self.conv1 = _Conv2d(params, rng, f"{name}.conv1", cin_folded, cout, 3)
        self.conv2 = _Conv2d(params, rng, f"{name}.conv2", cout, cout, 3)

    def __call__(self, v):
        flat = height_to_channels(v)
        return self.conv2(ad.relu(self.conv1(flat)))


class _UNet:
    def __init__(self, params, rng, name, cin, width, depth, n_out):
        widths = [width * 2 ** i for i in range(depth)]
        self.enc = []
        c = cin
        for i, w in enumerate(widths[:-1]):
            self.enc.append((_Conv2d(params, rng, f"{name}.enc{i}a", c, w, 3),
                             _Conv2d(params, rng, f"{name}.enc{i}b", w, w, 3)))
            c = w
        self.mid = (_Conv2d(params, rng, f"{name}.mida", c, widths[-1], 3),
                    _Conv2d(params, rng, f"{name}.midb", widths[-1], widths[-1], 3))
        self.dec = []
        c = widths[-1]
        for i, w in reversed(list(enumerate(widths[:-1]))):
            self.dec.append((_Conv2d(params, rng, f"{name}.dec{i}a", c + w, w, 3),
                             _Conv2d(params, rng, f"{name}.dec{i}b", w, w, 3)))
            c = w
        self.head = _Conv2d(params, rng, f"{name}.head", c, n_out, 1)

    def __call__(self, x):
        skips = []
        h = x
        for ca, cb in self.enc:
            h = ad.relu(cb(ad.relu(ca(h))))
            skips.append(h)
            h = ad.maxpool2d(h)
        h = ad.relu(self.mid[1](ad.relu(self.mid[0](h))))
        for (ca, cb), skip in zip(self.dec, reversed(skips)):
            h = ad.concat([ad.upsample2d(h), skip], axis=1)
            h = ad.relu(cb(ad.relu(ca(h))))
        return self.head(h)


def height_to_channels(v: Tensor) -> Tensor:
    """(1, C, D, H, W) -> (1, C*H, D, W): a bijective axis shuffle that keeps
    every height slice as its own channel group."""
    n, c, d, h, w = v.data.shape
    return ad.reshape(ad.permute(v, (0, 1, 3, 2, 4)), (n, c * h, d, w))


def channels_to_height(flat: Tensor, c: int, h: int) -> Tensor:
    """Exact inverse of height_to_channels."""
    n, ch, d, w = flat.data.shape
    if ch != c * h:
        raise ValueError(f"channels_to_height: {ch} channels cannot split into {c}x{h}")
    return ad.permute(ad.reshape(flat, (n, c, h, d, w)), (0, 1, 3, 2, 4))


# ---------------------------------------------------------------------------
# the model

class SbevModel:
    """One variant of the stereo BEV layout estimator, with its sampling
    grids precomputed from the rig, ground plane, and layout."""

    def __init__(self, config: ModelConfig, rig: StereoRig, plane: GroundPlane,
                 layout: LayoutSpec, seed: int = 0):
        if config.n_classes != layout.n_classes:
            raise ValueError(f"model has {config.n_classes} classes but layout declares "
                             f"{layout.n_classes}")
        if config.max_disparity >= rig.image_w:
            raise ValueError(f"max_disparity {config.max_disparity} must stay below "
                             f"image width {rig.image_w}")
        if rig.image_w % config.feat_downsample or rig.image_h % config.feat_downsample:
            raise ValueError(
                f"image {rig.image_w}x{rig.image_h} not divisible by "
                f"feat_downsample={config.feat_downsample}")
        pool = 2 ** (config.unet_depth - 1)
        if layout.n_x % pool or layout.n_y % pool:
            raise ValueError(f"layout grid {layout.n_y}x{layout.n_x} not divisible by "
                             f"the U-Net pooling factor {pool}")
        self.config = config
        self.rig = rig
        self.plane = plane
        self.layout = layout
        self.feat_w = rig.image_w // config.feat_downsample
        self.feat_h = rig.image_h // config.feat_downsample

        cfg = config
        self.params: dict = {}
        rng = np.random.default_rng(seed)
        if cfg.variant in STEREO_VARIANTS:
            self.extractor = _Extractor(self.params, rng, "extractor", 3,
                                        cfg.channels, cfg.feat_downsample)
            self.refiner = _Refiner(self.params, rng, "refiner", 2 * cfg.channels,
                                    cfg.volume_channels)
            self.reducer = _Reducer(self.params, rng, "reducer",
                                    cfg.volume_channels * self.feat_h, cfg.reduced_channels)
        head_in = {
            "stereo_only": cfg.reduced_channels,
            "stereo_rgb_ipm": cfg.reduced_channels + 3,
            "stereo_feat_ipm": cfg.reduced_channels + cfg.channels,
            "full": cfg.reduced_channels + cfg.channels + 3,
            "cmd": cfg.reduced_channels,
            "pseudo_lidar": cfg.n_classes,
            "ipm_only": 3,
        }[cfg.variant]
        self.unet = _UNet(self.params, rng, "unet", head_in, cfg.unet_width,
                          cfg.unet_depth, cfg.n_classes)
        if cfg.variant == "cmd":
            self.unet_ipm = _UNet(self.params, rng, "unet_ipm", cfg.channels,
                                  cfg.unet_width, cfg.unet_depth, cfg.n_classes)

        self.stereo_grid = make_stereo_bev_grid(
            rig, layout, vol_w=self.feat_w, vol_d=cfg.planes,
            feat_downsample=cfg.feat_downsample, disp_step=cfg.disp_step)
        self.ipm_img_grid = make_ipm_grid(rig, plane, layout, src_w=rig.image_w,
                                          src_h=rig.image_h, src_downsample=1)
        self.ipm_feat_grid = make_ipm_grid(rig, plane, layout, src_w=self.feat_w,
                                           src_h=self.feat_h, src_downsample=cfg.feat_downsample)

    @property
    def variant(self) -> str:
        return self.config.variant

    def named_parameters(self) -> dict:
        return self.params

    # -- stages ---------------------------------------------------------

    def extract_features(self, image: Tensor) -> Tensor:
        """(1, 3, H, W) -> (1, C, H/ds, W/ds) through the shared encoder."""
        return self.extractor(image)

    def build_feature_volume(self, f_ref: Tensor, f_tgt: Tensor) -> Tensor:
        """Stack [F_R ; F_T shifted by plane disparity] over planes; plane k
        shifts the target features right by k*disp_step_feat so content with
        disparity k*disp_step aligns with the reference."""
        step = self.config.disp_step_feat
        n, c, h, w = f_ref.data.shape
        planes = []
        for k in range(self.config.planes):
            shifted = ad.hshift(f_tgt, k * step) if k else f_tgt
            planes.append(ad.reshape(ad.concat([f_ref, shifted], axis=1),
                                     (n, 2 * c, 1, h, w)))
        return ad.concat(planes, axis=2)

    def refine_volume(self, volume: Tensor) -> Tensor:
        return self.refiner(volume)

    def reduce_volume(self, refined: Tensor) -> Tensor:
        return self.reducer(refined)

    def stereo_bev(self, reduced: Tensor) -> Tensor:
        g = self.stereo_grid
        n, c, d, w = reduced.data.shape
        if (d, w) != (g.src_h, g.src_w):
            raise ValueError(f"stereo_bev: volume ({d}, {w}) does not match the "
                             f"grid's source ({g.src_h}, {g.src_w})")
        return ad.grid_sample_bilinear(reduced, g.grid_tensor())

    def ipm_branch(self, image: Tensor, f_ref: Tensor):
        """IPM-warped RGB and feature maps; the image path has no parameters."""
        return (ad.grid_sample_bilinear(image, self.ipm_img_grid.grid_tensor()),
                ad.grid_sample_bilinear(f_ref, self.ipm_feat_grid.grid_tensor()))

    # -- full passes ------------------------------------------------------

    def _stereo_map(self, left: Tensor, right: Tensor):
        f_ref = self.extract_features(left)
        f_tgt = self.extract_features(right)
        vol = self.build_feature_volume(f_ref, f_tgt)
        reduced = self.reduce_volume(self.refine_volume(vol))
        return self.stereo_bev(reduced), f_ref

    def _logits3(self, out: Tensor) -> Tensor:
        _, c, h, w = out.data.shape
        return ad.reshape(out, (c, h, w))

    def forward(self, left, right) -> Tensor:
        """Inference logits (n_classes, N_y, N_x). For the distillation
        variant this is the stereo head alone: no IPM input is touched."""
        left = left if isinstance(left, Tensor) else Tensor(left[None])
        right = right if isinstance(right, Tensor) else Tensor(right[None])
        v = self.variant
        if v in ("pseudo_lidar", "ipm_only"):
            raise ValueError(f"forward: variant {v!r} takes projected inputs; "
                             f"use forward_{v}")
        r_stereo, f_ref = self._stereo_map(left, right)
        if v in ("stereo_only", "cmd"):
            feats = r_stereo
        else:
            r_img, r_feat = self.ipm_branch(left, f_ref)
            if v == "stereo_rgb_ipm":
                feats = ad.concat([r_img, r_stereo], axis=1)
            elif v == "stereo_feat_ipm":
                feats = ad.concat([r_feat, r_stereo], axis=1)
            else:  # full: [ipm_feat ; ipm_img ; stereo]
                feats = ad.concat([r_feat, r_img, r_stereo], axis=1)
        return self._logits3(self.unet(feats))

    def forward_cmd_training(self, left, right):
        """Distillation training pass: (stereo logits, ipm logits, tie loss)."""
        if self.variant != "cmd":
            raise ValueError(f"forward_cmd_training: variant is {self.variant!r}, not cmd")
        left = left if isinstance(left, Tensor) else Tensor(left[None])
        right = right if isinstance(right, Tensor) else Tensor(right[None])
        r_stereo, f_ref = self._stereo_map(left, right)
        _, r_feat = self.ipm_branch(left, f_ref)
        l_kt = ad.l1_first_k(r_feat, r_stereo, self.config.distill_channels)
        return (self._logits3(self.unet(r_stereo)),
                self._logits3(self.unet_ipm(r_feat)),
                l_kt)

    def forward_pseudo_lidar(self, planes) -> Tensor:
        if self.variant != "pseudo_lidar":
            raise ValueError(f"forward_pseudo_lidar: variant is {self.variant!r}")
        planes = planes if isinstance(planes, Tensor) else Tensor(planes[None])
        return self._logits3(self.unet(planes))

    def forward_ipm_only(self, left) -> Tensor:
        if self.variant != "ipm_only":
            raise ValueError(f"forward_ipm_only: variant is {self.variant!r}")
        left = left if isinstance(left, Tensor) else Tensor(left[None])
        warped = ad.grid_sample_bilinear(left, self.ipm_img_grid.grid_tensor())
        return self._logits3(self.unet(warped))


# ---------------------------------------------------------------------------
# baselines' input projections

def pseudo_lidar_bev(depth: np.ndarray, front_classes: np.ndarray, rig: StereoRig,
                     layout: LayoutSpec) -> np.ndarray:
    """Back-project every valid pixel to 3D, drop height, and splat per-class
    counts into BEV cells, normalized per cell. Pixels with non-positive or
    non-finite depth (sky) and out-of-range classes are ignored."""
    h, w = depth.shape
    us = np.broadcast_to(np.arange(w, dtype=np.float64), (h, w))
    valid = np.isfinite(depth) & (depth > 0) & (front_classes >= 0) & \
        (front_classes < layout.n_classes)
    d = np.where(valid, depth, 1.0)
    x = (us - rig.c_x) * d / rig.f
    y = d
    ix = np.floor((x - layout.x_min) / layout.cell_w).astype(np.int64)
    iy = np.floor((y - layout.y_min) / layout.cell_d).astype(np.int64)
    valid &= (ix >= 0) & (ix < layout.n_x) & (iy >= 0) & (iy < layout.n_y)
    counts = np.zeros((layout.n_classes, layout.n_y, layout.n_x))
    np.add.at(counts, (front_classes[valid].astype(np.int64), iy[valid], ix[valid]), 1.0)
    total = counts.sum(axis=0, keepdims=True)
    return counts / np.maximum(total, 1.0)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: SbevModel, path: str) -> None:
    """Binary tensor container plus a JSON sidecar (<path>.json) holding the
    model configuration and geometry, enough to rebuild the model alone."""
    dio.write_tensor_file(path, {k: v.data for k, v in model.params.items()})
    doc = {
        "model": asdict(model.config),
        "rig": asdict(model.rig),
        "plane": asdict(model.plane),
        "layout": asdict(model.layout),
    }
    dio.atomic_write_text(path + ".json", json.dumps(doc, indent=1))


def load_checkpoint(path: str, expect_variant: str | None = None) -> SbevModel:
    try:
        with open(path + ".json", "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise DataError(f"missing checkpoint sidecar {path}.json: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"invalid checkpoint sidecar {path}.json: {e}") from e
    try:
        config = ModelConfig(**doc["model"])
        model = SbevModel(config, StereoRig(**doc["rig"]), GroundPlane(**doc["plane"]),
                          LayoutSpec(**doc["layout"]), seed=0)
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"checkpoint sidecar {path}.json is inconsistent: {e}") from e
    if expect_variant is not None and config.variant != expect_variant:
        raise DataError(f"checkpoint {path} holds variant {config.variant!r}, "
                        f"expected {expect_variant!r}")
    tensors = dio.read_tensor_file(path)
    if set(tensors) != set(model.params):
        missing = sorted(set(model.params) - set(tensors))[:3]
        extra = sorted(set(tensors) - set(model.params))[:3]
        raise DataError(f"checkpoint {path} does not match its config "
                        f"(missing {missing}, unexpected {extra})")
    for name, arr in tensors.items():
        p = model.params[name]
        if arr.shape != p.data.shape:
            raise DataError(f"checkpoint {path}: tensor {name!r} has shape {arr.shape}, "
                            f"model expects {p.data.shape}")
        p.data = np.ascontiguousarray(arr)
    return model
