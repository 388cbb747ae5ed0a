"""On-disk formats: PPM/PGM images, raw float32 depth, JSON manifests, and
the binary checkpoint container. All writes are atomic (temp file + rename)
and all multi-byte fields are little-endian regardless of host.

Byte layouts
------------
images      binary PPM (P6, maxval 255); class grids and visibility masks are
            binary PGM (P5): class indices 0..N_C-1, visibility 0/255.
depth       magic "DPTH", u16 width, u16 height (little-endian), then
            width*height float32 little-endian values in row-major order.
            Round trip returns exactly the float32 payload.
checkpoint  magic "SBVK", u32 format version (1), u32 tensor count; per
            tensor: u32 name byte-length, UTF-8 name, u32 rank, u64 extents,
            then float64 little-endian payload. Bit-exact round trip.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError
from .geometry import GroundPlane, LayoutSpec, StereoRig

__all__ = [
    "atomic_write_bytes", "atomic_write_text",
    "write_ppm", "read_ppm", "write_pgm", "read_pgm",
    "write_depth", "read_depth",
    "SampleRecord", "DatasetManifest", "write_sample", "read_sample",
    "write_manifest", "read_manifest",
    "write_tensor_file", "read_tensor_file",
    "Sample", "load_samples",
]

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
CHECKPOINT_MAGIC = b"SBVK"
CHECKPOINT_VERSION = 1
DEPTH_MAGIC = b"DPTH"

MANIFEST_FIELDS = {"format_version", "split", "rig", "plane", "layout",
                   "classes", "palette", "samples"}
RECORD_FIELDS = {"id", "left", "right", "depth", "layout", "visibility", "scene"}


def atomic_write_bytes(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp_")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# netpbm images

def write_ppm(path: str, image: np.ndarray) -> None:
    """image: (3, H, W) float in [0, 1] or uint8."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"write_ppm: expected (3, H, W) image, got {image.shape} [{path}]")
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    _, h, w = image.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + image.transpose(1, 2, 0).tobytes())


def write_pgm(path: str, grid: np.ndarray) -> None:
    """grid: (H, W) uint8 values."""
    if grid.ndim != 2:
        raise DataError(f"write_pgm: expected (H, W) grid, got {grid.shape} [{path}]")
    g = grid.astype(np.uint8)
    h, w = g.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + g.tobytes())


def _read_pnm(path: str, magic: str):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not raw.startswith(magic.encode("ascii")):
        raise DataError(f"bad magic in {path}: expected {magic}")
    # header is exactly three whitespace-separated tokens after the magic
    parts = raw[2:].split(maxsplit=3)
    if len(parts) < 4:
        raise DataError(f"truncated header in {path}")
    try:
        w, h, maxval = int(parts[0]), int(parts[1]), int(parts[2])
    except ValueError as e:
        raise DataError(f"malformed header in {path}") from e
    if maxval != 255:
        raise DataError(f"unsupported maxval {maxval} in {path}")
    body = parts[3]
    nchan = 3 if magic == "P6" else 1
    need = w * h * nchan
    if len(body) < need:
        raise DataError(f"truncated pixel data in {path}: need {need} bytes, have {len(body)}")
    data = np.frombuffer(body[:need], dtype=np.uint8)
    return data, w, h


def read_ppm(path: str) -> np.ndarray:
    """Returns (3, H, W) uint8."""
    data, w, h = _read_pnm(path, "P6")
    return np.ascontiguousarray(data.reshape(h, w, 3).transpose(2, 0, 1))


def read_pgm(path: str) -> np.ndarray:
    """Returns (H, W) uint8."""
    data, w, h = _read_pnm(path, "P5")
    return data.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# depth maps

def write_depth(path: str, depth: np.ndarray) -> None:
    if depth.ndim != 2:
        raise DataError(f"write_depth: expected (H, W) array, got {depth.shape} [{path}]")
    h, w = depth.shape
    header = DEPTH_MAGIC + struct.pack("<HH", w, h)
    atomic_write_bytes(path, header + depth.astype("<f4").tobytes())


def read_depth(path: str) -> np.ndarray:
    """Returns (H, W) float64 holding the exact float32 stored values."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if len(raw) < 8 or raw[:4] != DEPTH_MAGIC:
        raise DataError(f"bad depth magic in {path}")
    w, h = struct.unpack("<HH", raw[4:8])
    need = 8 + 4 * w * h
    if len(raw) < need:
        raise DataError(f"truncated depth data in {path}: need {need} bytes, have {len(raw)}")
    return np.frombuffer(raw[8:need], dtype="<f4").astype(np.float64).reshape(h, w)


# ---------------------------------------------------------------------------
# samples and manifests

@dataclass
class SampleRecord:
    """File paths of one sample, relative to the manifest directory."""
    id: str
    left: str
    right: str
    depth: str
    layout: str
    visibility: str
    scene: str


@dataclass
class DatasetManifest:
    split: str
    rig: StereoRig
    plane: GroundPlane
    layout: LayoutSpec
    classes: list
    palette: list
    samples: list
    root: str = "."  # directory the relative paths resolve against

    def resolve(self, rel: str) -> str:
        return os.path.join(self.root, rel)


def write_sample(out_dir: str, sample_id: str, left, right, depth,
                 layout_grid, visibility, scene_json: str) -> SampleRecord:
    rec = SampleRecord(
        id=sample_id,
        left=f"{sample_id}_left.ppm",
        right=f"{sample_id}_right.ppm",
        depth=f"{sample_id}_depth.dpt",
        layout=f"{sample_id}_layout.pgm",
        visibility=f"{sample_id}_vis.pgm",
        scene=f"{sample_id}_scene.json",
    )
    write_ppm(os.path.join(out_dir, rec.left), left)
    write_ppm(os.path.join(out_dir, rec.right), right)
    write_depth(os.path.join(out_dir, rec.depth), depth)
    write_pgm(os.path.join(out_dir, rec.layout), layout_grid)
    write_pgm(os.path.join(out_dir, rec.visibility), (np.asarray(visibility) > 0) * np.uint8(255))
    atomic_write_text(os.path.join(out_dir, rec.scene), scene_json)
    return rec


def read_sample(manifest: DatasetManifest, rec: SampleRecord):
    """Returns (left u8, right u8, depth f64, layout int, visibility {0,1})."""
    left = read_ppm(manifest.resolve(rec.left))
    right = read_ppm(manifest.resolve(rec.right))
    depth = read_depth(manifest.resolve(rec.depth))
    grid = read_pgm(manifest.resolve(rec.layout))
    n_c = manifest.layout.n_classes
    if grid.max() >= n_c:
        raise DataError(
            f"layout grid {rec.layout} holds class {int(grid.max())} but the "
            f"manifest declares {n_c} classes")
    vis = (read_pgm(manifest.resolve(rec.visibility)) > 0).astype(np.uint8)
    return left, right, depth, grid.astype(np.int16), vis


def write_manifest(path: str, manifest: DatasetManifest) -> None:
    doc = {
        "format_version": MANIFEST_VERSION,
        "split": manifest.split,
        "rig": asdict(manifest.rig),
        "plane": asdict(manifest.plane),
        "layout": asdict(manifest.layout),
        "classes": list(manifest.classes),
        "palette": [list(c) for c in manifest.palette],
        "samples": [asdict(r) for r in manifest.samples],
    }
    atomic_write_text(path, json.dumps(doc, indent=1))


def read_manifest(path: str, check_files: bool = True) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from e

    unknown = set(doc) - MANIFEST_FIELDS
    if unknown:
        log.warning("manifest %s: ignoring unknown fields %s", path, sorted(unknown))
    for key in MANIFEST_FIELDS:
        if key not in doc:
            raise DataError(f"manifest {path} missing required field {key!r}")
    if doc["format_version"] != MANIFEST_VERSION:
        raise DataError(
            f"manifest {path} has format_version {doc['format_version']}, "
            f"expected {MANIFEST_VERSION}")

    try:
        rig = StereoRig(**doc["rig"])
        plane = GroundPlane(**doc["plane"])
        layout = LayoutSpec(**doc["layout"])
    except (TypeError, ValueError) as e:
        raise DataError(f"manifest {path} has invalid geometry: {e}") from e
    if len(doc["palette"]) != layout.n_classes:
        raise DataError(
            f"manifest {path}: palette has {len(doc['palette'])} entries, "
            f"expected {layout.n_classes}")

    samples = []
    for raw in doc["samples"]:
        unknown = set(raw) - RECORD_FIELDS
        if unknown:
            log.warning("manifest %s sample %s: ignoring unknown fields %s",
                        path, raw.get("id"), sorted(unknown))
        try:
            samples.append(SampleRecord(**{k: raw[k] for k in RECORD_FIELDS}))
        except KeyError as e:
            raise DataError(f"manifest {path}: sample record missing field {e}") from e

    man = DatasetManifest(split=doc["split"], rig=rig, plane=plane, layout=layout,
                          classes=doc["classes"], palette=doc["palette"],
                          samples=samples, root=os.path.dirname(os.path.abspath(path)))
    if check_files:
        for rec in man.samples:
            for rel in (rec.left, rec.right, rec.depth, rec.layout, rec.visibility, rec.scene):
                if not os.path.exists(man.resolve(rel)):
                    raise DataError(f"manifest {path}: sample file missing: {rel}")
    return man


# ---------------------------------------------------------------------------
# checkpoint tensor container

def write_tensor_file(path: str, tensors: dict) -> None:
    """tensors: ordered name -> np.ndarray (stored as float64)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def read_tensor_file(path: str) -> dict:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"bad checkpoint magic in {path}")
    version, count = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint {path} has version {version}, expected {CHECKPOINT_VERSION}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", raw, off) if rank else ()
            off += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            end = off + 8 * n
            if end > len(raw):
                raise DataError(f"truncated tensor payload in {path} for {name!r}")
            out[name] = np.frombuffer(raw[off:end], dtype="<f8").astype(np.float64).reshape(shape)
            off = end
    except struct.error as e:
        raise DataError(f"truncated checkpoint {path}: {e}") from e
    if off != len(raw):
        raise DataError(f"trailing garbage in checkpoint {path}")
    return out


# ---------------------------------------------------------------------------
# in-memory dataset

@dataclass
class Sample:
    """One decoded sample kept in compact dtypes; float views made on demand."""
    id: str
    left_u8: np.ndarray
    right_u8: np.ndarray
    depth: np.ndarray
    gt: np.ndarray
    visibility: np.ndarray
    scene_path: str

    @property
    def left(self) -> np.ndarray:
        return self.left_u8.astype(np.float64) / 255.0

    @property
    def right(self) -> np.ndarray:
        return self.right_u8.astype(np.float64) / 255.0


def load_samples(manifest: DatasetManifest, ids=None, fraction: float = 1.0) -> list:
    """Decode samples into memory; `fraction` keeps the leading fraction of
    the manifest order (so smaller fractions are prefixes of larger ones)."""
    recs = manifest.samples
    if ids is not None:
        wanted = set(ids)
        recs = [r for r in recs if r.id in wanted]
    if fraction < 1.0:
        keep = max(1, int(round(len(recs) * fraction)))
        recs = recs[:keep]
    out = []
    for rec in recs:
        left, right, depth, grid, vis = read_sample(manifest, rec)
        out.append(Sample(id=rec.id, left_u8=left, right_u8=right, depth=depth,
                          gt=grid, visibility=vis,
                          scene_path=manifest.resolve(rec.scene)))
    return out
