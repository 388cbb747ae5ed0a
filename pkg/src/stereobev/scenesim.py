"""Procedural stereo-scene generator.

Scenes are a textured ground plane (with road and sidewalk strips painted on
it) plus yawed boxes for cars and buildings. Rendering is per-pixel ray
casting against those primitives with a z-buffer, which for this geometry is
exact: analytic ground-truth checks hold to float precision. Every surface is
modulated by a world-space hash texture so stereo correspondence is
well-posed; both views see the same pattern displaced purely geometrically.

World frame and camera model follow stereobev.geometry: z up, origin at the
reference camera's ground projection, camera center at (0, 0, plane.c), the
target camera translated by +t_x along x.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import GroundPlane, LayoutSpec, StereoRig

__all__ = [
    "CLASS_NAMES", "PALETTE", "SKY_CLASS",
    "Box", "Strip", "SceneSpec", "SceneParams", "SemanticMap", "RenderedView",
    "sample_scene", "render_view", "render_stereo",
    "gt_layout", "visibility_mask", "make_dataset",
    "default_rig", "default_plane", "default_layout",
]

CLASS_NAMES = ("ground", "road", "sidewalk", "car", "building")
GROUND, ROAD, SIDEWALK, CAR, BUILDING = range(5)
SKY_CLASS = 255

PALETTE = np.array([
    [0.24, 0.45, 0.20],   # ground / grass
    [0.34, 0.34, 0.37],   # road asphalt
    [0.62, 0.60, 0.56],   # sidewalk
    [0.75, 0.15, 0.12],   # car
    [0.55, 0.42, 0.28],   # building
])
SKY_COLOR = np.array([0.55, 0.70, 0.92])

TEXTURE_CELL = 0.1437    # meters per block; incommensurate with scene grids so
                         # block edges do not systematically align with geometry
TEXTURE_AMP = 0.25       # >= 0.1 so stereo matching stays well-posed

DEFAULT_OPAQUE = frozenset({CAR, BUILDING})


def default_rig() -> StereoRig:
    return StereoRig(f=120.0, c_x=64.0, c_y=48.0, t_x=0.54, image_w=128, image_h=96)


def default_plane() -> GroundPlane:
    return GroundPlane(a=0.0, b=0.0, c=1.5)


def default_layout() -> LayoutSpec:
    return LayoutSpec(x_min=-12.0, x_max=12.0, y_min=4.0, y_max=28.0,
                      n_x=48, n_y=48, n_classes=5)


# ---------------------------------------------------------------------------
# scene description

@dataclass
class Box:
    class_id: int
    cx: float
    cy: float
    w: float        # lateral extent (local x)
    l: float        # forward extent (local y)
    h: float
    yaw: float
    color: tuple


@dataclass
class Strip:
    """Axis-aligned ground region painted with a class (road, sidewalk)."""
    class_id: int
    x0: float
    x1: float
    y0: float
    y1: float


@dataclass
class SceneSpec:
    ground_class: int
    boxes: list
    strips: list
    texture_seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @staticmethod
    def from_json(text: str) -> "SceneSpec":
        raw = json.loads(text)
        return SceneSpec(
            ground_class=raw["ground_class"],
            boxes=[Box(**{**b, "color": tuple(b["color"])}) for b in raw["boxes"]],
            strips=[Strip(**s) for s in raw["strips"]],
            texture_seed=raw["texture_seed"],
        )


@dataclass
class SceneParams:
    """Difficulty knobs for the generator. Ranges are inclusive. texture_amp
    scales the surface noise: low values make raw stereo matching harder
    (must stay >= 0.1 to keep it well-posed)."""
    n_cars: tuple = (2, 8)
    n_buildings: tuple = (0, 4)
    road: bool = True
    sidewalks: bool = True
    x_range: tuple = (-12.0, 12.0)
    y_range: tuple = (6.0, 27.0)
    texture_amp: float = TEXTURE_AMP

    @property
    def wants_objects(self) -> bool:
        return self.n_cars[1] > 0 or self.n_buildings[1] > 0


@dataclass
class SemanticMap:
    """Ground-truth BEV layout: class-index grid plus visibility mask."""
    classes: np.ndarray   # (n_y, n_x) int
    mask: np.ndarray      # (n_y, n_x) {0,1}


@dataclass
class RenderedView:
    image: np.ndarray     # (3, H, W) in [0, 1]
    depth: np.ndarray     # (H, W) forward depth in meters, inf for sky
    classes: np.ndarray   # (H, W) int16, SKY_CLASS where no surface


# ---------------------------------------------------------------------------
# generator

def _jitter_color(rng, base, amount=0.12):
    c = np.asarray(base) + rng.uniform(-amount, amount, size=3)
    return tuple(np.clip(c, 0.05, 0.95))


def sample_scene(seed: int, params: SceneParams | None = None) -> SceneSpec:
    """Deterministic-in-seed procedural scene. When any objects are requested
    the first car (or building) is pinned near the optical axis, so at least
    one object always sits inside the camera frustum."""
    params = params or SceneParams()
    rng = np.random.default_rng(seed)
    x_lo, x_hi = params.x_range
    y_lo, y_hi = params.y_range

    strips = []
    road_x, road_w = 0.0, 0.0
    if params.road:
        road_x = rng.uniform(-5.0, 5.0)
        road_w = rng.uniform(5.0, 8.0)
        strips.append(Strip(ROAD, road_x - road_w / 2, road_x + road_w / 2,
                            y_lo - 20.0, y_hi + 20.0))
        if params.sidewalks:
            for side in (-1.0, 1.0):
                sw = rng.uniform(1.5, 2.5)
                inner = road_x + side * road_w / 2
                strips.append(Strip(SIDEWALK, min(inner, inner + side * sw),
                                    max(inner, inner + side * sw),
                                    y_lo - 20.0, y_hi + 20.0))

    boxes = []
    n_cars = int(rng.integers(params.n_cars[0], params.n_cars[1] + 1))
    for i in range(n_cars):
        w = rng.uniform(1.7, 2.1)
        l = rng.uniform(3.8, 4.8)
        h = rng.uniform(1.3, 1.7)
        if i == 0:
            cx = rng.uniform(-2.0, 2.0)
            cy = rng.uniform(y_lo + 0.3 * (y_hi - y_lo), y_lo + 0.7 * (y_hi - y_lo))
            yaw = rng.uniform(-0.15, 0.15)
        elif params.road and rng.uniform() < 0.7:
            cx = road_x + rng.uniform(-road_w / 2 + 1.2, road_w / 2 - 1.2)
            cy = rng.uniform(y_lo, y_hi)
            yaw = rng.uniform(-0.15, 0.15)
        else:
            cx = rng.uniform(x_lo + 1.5, x_hi - 1.5)
            cy = rng.uniform(y_lo, y_hi)
            yaw = rng.uniform(0.0, 2 * np.pi)
        boxes.append(Box(CAR, cx, cy, w, l, h, yaw, _jitter_color(rng, PALETTE[CAR])))

    n_buildings = int(rng.integers(params.n_buildings[0], params.n_buildings[1] + 1))
    for i in range(n_buildings):
        w = rng.uniform(4.0, 9.0)
        l = rng.uniform(4.0, 9.0)
        h = rng.uniform(3.0, 8.0)
        if n_cars == 0 and i == 0:
            cx = rng.uniform(-3.0, 3.0)
            cy = rng.uniform(y_lo + 0.4 * (y_hi - y_lo), y_hi)
        else:
            # keep buildings off the road corridor
            margin = road_w / 2 + 3.0 + w / 2 if params.road else 0.0
            side = rng.choice([-1.0, 1.0])
            lo = road_x + side * margin if params.road else x_lo
            cx = rng.uniform(min(lo, side * x_hi), max(lo, side * x_hi)) if params.road \
                else rng.uniform(x_lo, x_hi)
            cx = float(np.clip(cx, x_lo + 1.0, x_hi - 1.0))
            cy = rng.uniform(y_lo + 2.0, y_hi)
        yaw = rng.uniform(-0.2, 0.2)
        boxes.append(Box(BUILDING, cx, cy, w, l, h, yaw, _jitter_color(rng, PALETTE[BUILDING])))

    return SceneSpec(ground_class=GROUND, boxes=boxes, strips=strips,
                     texture_seed=int(rng.integers(0, 2 ** 63)))


# ---------------------------------------------------------------------------
# rendering

def _hash01(ix, iy, iz, seed):
    """Deterministic world-space noise in [0, 1) from integer lattice coords."""
    m = np.uint64
    h = ix.astype(np.int64).astype(np.uint64) * m(0x9E3779B97F4A7C15)
    h ^= iy.astype(np.int64).astype(np.uint64) * m(0xBF58476D1CE4E5B9)
    h ^= iz.astype(np.int64).astype(np.uint64) * m(0x94D049BB133111EB)
    h ^= m(seed & 0x7FFFFFFFFFFFFFFF) * m(0xD6E8FEB86659FD93)
    h ^= h >> m(33)
    h *= m(0xFF51AFD7ED558CCD)
    h ^= h >> m(33)
    return (h >> m(11)).astype(np.float64) * 2.0 ** -53


def _texture_factor(px, py, pz, seed, amp):
    q = 1.0 / TEXTURE_CELL
    noise = _hash01(np.floor(px * q), np.floor(py * q), np.floor(pz * q), seed)
    return 1.0 + amp * (2.0 * noise - 1.0)


def _ground_class_color(scene: SceneSpec, px, py):
    cls = np.full(px.shape, scene.ground_class, dtype=np.int16)
    for s in scene.strips:
        inside = (px >= s.x0) & (px < s.x1) & (py >= s.y0) & (py < s.y1)
        cls[inside] = s.class_id
    color = PALETTE[np.clip(cls, 0, len(PALETTE) - 1)]
    return cls, color


def render_view(scene: SceneSpec, rig: StereoRig, plane: GroundPlane,
                cam_x: float = 0.0, texture_amp: float = TEXTURE_AMP) -> RenderedView:
    """Ray-cast one pinhole view from camera center (cam_x, 0, plane.c)."""
    if texture_amp < 0.1:
        raise ValueError(f"texture_amp {texture_amp} below 0.1 makes stereo matching ill-posed")
    h, w = rig.image_h, rig.image_w
    us = np.arange(w, dtype=np.float64)
    vs = np.arange(h, dtype=np.float64)
    dx = (us[None, :] - rig.c_x) / rig.f * np.ones((h, 1))
    dz = (rig.c_y - vs[:, None]) / rig.f * np.ones((1, w))
    # forward depth t parametrizes ray (cam + t*(dx, 1, dz))

    depth = np.full((h, w), np.inf)
    classes = np.full((h, w), SKY_CLASS, dtype=np.int16)
    color = np.broadcast_to(SKY_COLOR, (h, w, 3)).copy()
    tex_z = np.zeros((h, w))
    tex_seed = np.zeros((h, w), dtype=np.int64)

    # ground plane: drop below camera horizontal is a*x + b*y + c
    denom = dz + plane.a * dx + plane.b
    num = -(plane.c + plane.a * cam_x)
    with np.errstate(divide="ignore"):
        t_ground = num / denom
    hit = (denom < -1e-12) & (t_ground > 0)
    tg = t_ground[hit]
    gx = cam_x + tg * dx[hit]
    gy = tg
    gcls, gcol = _ground_class_color(scene, gx, gy)
    depth[hit] = tg
    classes[hit] = gcls
    color[hit] = gcol
    tex_z[hit] = -(plane.a * gx + plane.b * gy)
    tex_seed[hit] = scene.texture_seed & 0x7FFFFFFFFFFFFFFF

    for bi, box in enumerate(scene.boxes):
        z0 = -(plane.a * box.cx + plane.b * box.cy)
        cos, sin = np.cos(box.yaw), np.sin(box.yaw)
        # ray into box-local frame (rotate xy by -yaw, shift origin to box base)
        ox = cos * (cam_x - box.cx) + sin * (0.0 - box.cy)
        oy = -sin * (cam_x - box.cx) + cos * (0.0 - box.cy)
        oz = plane.c - z0
        ldx = cos * dx + sin * 1.0
        ldy = -sin * dx + cos * 1.0
        ldz = dz
        with np.errstate(divide="ignore", invalid="ignore"):
            tn, tf = None, None
            for o, d, lo, hi in ((ox, ldx, -box.w / 2, box.w / 2),
                                 (oy, ldy, -box.l / 2, box.l / 2),
                                 (oz, ldz, 0.0, box.h)):
                t1 = (lo - o) / d
                t2 = (hi - o) / d
                lo_t = np.fmin(t1, t2)
                hi_t = np.fmax(t1, t2)
                tn = lo_t if tn is None else np.fmax(tn, lo_t)
                tf = hi_t if tf is None else np.fmin(tf, hi_t)
        bhit = (tn <= tf) & (tn > 1e-9) & (tn < depth)
        if not bhit.any():
            continue
        t = tn[bhit]
        depth[bhit] = t
        classes[bhit] = box.class_id
        color[bhit] = np.asarray(box.color)
        tex_z[bhit] = plane.c + t * dz[bhit]
        tex_seed[bhit] = (scene.texture_seed + 1 + bi) & 0x7FFFFFFFFFFFFFFF

    surf = depth < np.inf
    px = cam_x + depth[surf] * dx[surf]
    py = depth[surf]
    factor = np.ones((h, w))
    factor[surf] = _texture_factor(px, py, tex_z[surf], tex_seed[surf], texture_amp)
    img = np.clip(color * factor[..., None], 0.0, 1.0)
    return RenderedView(image=np.ascontiguousarray(img.transpose(2, 0, 1)),
                        depth=depth, classes=classes)


def render_stereo(scene: SceneSpec, rig: StereoRig, plane: GroundPlane,
                  texture_amp: float = TEXTURE_AMP):
    """Reference and target images plus the reference z-buffer (meters)."""
    ref = render_view(scene, rig, plane, cam_x=0.0, texture_amp=texture_amp)
    tgt = render_view(scene, rig, plane, cam_x=rig.t_x, texture_amp=texture_amp)
    return ref.image, tgt.image, ref.depth


# ---------------------------------------------------------------------------
# ground truth

def _box_footprint_mask(box: Box, bx, by):
    cos, sin = np.cos(box.yaw), np.sin(box.yaw)
    lx = cos * (bx - box.cx) + sin * (by - box.cy)
    ly = -sin * (bx - box.cx) + cos * (by - box.cy)
    return (np.abs(lx) <= box.w / 2) & (np.abs(ly) <= box.l / 2)


def gt_layout(scene: SceneSpec, layout: LayoutSpec) -> np.ndarray:
    """Occlusion-free top-down rasterization by cell centers. Strips paint in
    list order over the ground class; box footprints paint sorted by height so
    the taller object wins overlaps (later index wins exact ties)."""
    bx, by = layout.center_mesh()
    grid = np.full((layout.n_y, layout.n_x), scene.ground_class, dtype=np.int16)
    for s in scene.strips:
        inside = (bx >= s.x0) & (bx < s.x1) & (by >= s.y0) & (by < s.y1)
        grid[inside] = s.class_id
    for box in sorted(enumerate(scene.boxes), key=lambda ib: (ib[1].h, ib[0])):
        b = box[1]
        grid[_box_footprint_mask(b, bx, by)] = b.class_id
    return grid


def visibility_mask(gt: np.ndarray, layout: LayoutSpec,
                    opaque_classes=DEFAULT_OPAQUE, fov_deg: float = 56.145) -> np.ndarray:
    """Which BEV cells the front camera can observe.

    A cell is visible iff its center lies in the horizontal FOV wedge and the
    segment from the BEV origin to the center crosses no opaque cell square
    other than the cell's own; the first opaque cell along a ray therefore
    stays visible. Squares are shrunk by 1e-9 so corner-grazing rays do not
    block.
    """
    bx, by = layout.center_mesh()
    half = np.radians(fov_deg) / 2.0
    wedge = (by > 0) & (np.abs(np.arctan2(bx, by)) <= half + 1e-12)

    tx = bx.ravel()
    ty = by.ravel()
    blocked = np.zeros(tx.size, dtype=bool)
    xs, ys = layout.x_centers(), layout.y_centers()
    hw, hd = layout.cell_w / 2, layout.cell_d / 2
    eps = 1e-9
    opq = np.argwhere(np.isin(gt, list(opaque_classes)))
    with np.errstate(divide="ignore", invalid="ignore"):
        for iy, ix in opq:
            x0, x1 = xs[ix] - hw + eps, xs[ix] + hw - eps
            y0, y1 = ys[iy] - hd + eps, ys[iy] + hd - eps
            t1 = x0 / tx
            t2 = x1 / tx
            lox, hix = np.fmin(t1, t2), np.fmax(t1, t2)
            t1 = y0 / ty
            t2 = y1 / ty
            loy, hiy = np.fmin(t1, t2), np.fmax(t1, t2)
            slo = np.maximum(np.maximum(lox, loy), 0.0)
            shi = np.minimum(np.minimum(hix, hiy), 1.0)
            hit = slo <= shi
            hit[iy * layout.n_x + ix] = False
            blocked |= hit
    return (wedge & ~blocked.reshape(wedge.shape)).astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset generation

def make_dataset(n_scenes: int, seed: int, rig: StereoRig, plane: GroundPlane,
                 layout: LayoutSpec, out_dir: str, split: str = "train",
                 params: SceneParams | None = None):
    """Generate scenes seeded seed..seed+n_scenes-1, render and write them,
    and return the manifest (also written to <out_dir>/<split>.json)."""
    from . import io as dio

    records = []
    fov = rig.horizontal_fov_deg
    amp = (params or SceneParams()).texture_amp
    for i in range(n_scenes):
        scene = sample_scene(seed + i, params)
        left, right, depth = render_stereo(scene, rig, plane, texture_amp=amp)
        gt = gt_layout(scene, layout)
        vis = visibility_mask(gt, layout, fov_deg=fov)
        records.append(dio.write_sample(out_dir, f"{split}_{i:05d}", left, right,
                                        depth, gt, vis, scene.to_json()))
    manifest = dio.DatasetManifest(
        split=split, rig=rig, plane=plane, layout=layout,
        classes=list(CLASS_NAMES[:layout.n_classes]),
        palette=[list(np.round(PALETTE[c], 4)) for c in range(layout.n_classes)],
        samples=records, root=out_dir)
    dio.write_manifest(f"{out_dir}/{split}.json", manifest)
    return manifest
