"""Round-trip and corruption tests for every on-disk format."""

import os

import numpy as np
import pytest

import stereobev.io as dio
from stereobev.errors import DataError
from stereobev.geometry import GroundPlane, LayoutSpec, StereoRig
from stereobev import scenesim as sim


RIG = StereoRig(f=100.0, c_x=32.0, c_y=24.0, t_x=0.5, image_w=64, image_h=48)
PLANE = GroundPlane(0.0, 0.0, 1.5)
LAYOUT = LayoutSpec(-8, 8, 2, 18, 16, 16, 5)


class TestPnm:
    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(3, 5, 7), dtype=np.uint8)
        p = str(tmp_path / "x.ppm")
        dio.write_ppm(p, img)
        assert np.array_equal(dio.read_ppm(p), img)

    def test_ppm_from_float_quantizes(self, tmp_path):
        img = np.full((3, 2, 2), 0.5)
        p = str(tmp_path / "f.ppm")
        dio.write_ppm(p, img)
        assert (dio.read_ppm(p) == 128).all()  # rint(127.5) -> 128

    def test_pgm_round_trip(self, tmp_path):
        g = np.arange(12, dtype=np.uint8).reshape(3, 4)
        p = str(tmp_path / "g.pgm")
        dio.write_pgm(p, g)
        assert np.array_equal(dio.read_pgm(p), g)

    def test_truncated_rejected(self, tmp_path):
        p = str(tmp_path / "t.ppm")
        dio.write_ppm(p, np.zeros((3, 4, 4), dtype=np.uint8))
        raw = open(p, "rb").read()
        open(p, "wb").write(raw[:-5])
        with pytest.raises(DataError, match="truncated"):
            dio.read_ppm(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = str(tmp_path / "m.pgm")
        open(p, "wb").write(b"P6\n2 2\n255\n" + bytes(12))
        with pytest.raises(DataError, match="magic"):
            dio.read_pgm(p)


class TestDepth:
    def test_round_trip_exact_float32(self, tmp_path):
        rng = np.random.default_rng(1)
        d = rng.uniform(0.5, 40.0, size=(6, 9))
        d[0, 0] = np.inf
        p = str(tmp_path / "d.dpt")
        dio.write_depth(p, d)
        back = dio.read_depth(p)
        assert np.array_equal(back, d.astype(np.float32).astype(np.float64))

    def test_truncated_rejected(self, tmp_path):
        p = str(tmp_path / "d.dpt")
        dio.write_depth(p, np.ones((4, 4)))
        raw = open(p, "rb").read()
        open(p, "wb").write(raw[:-3])
        with pytest.raises(DataError, match="truncated"):
            dio.read_depth(p)

    def test_bad_magic(self, tmp_path):
        p = str(tmp_path / "d.dpt")
        open(p, "wb").write(b"NOPE" + bytes(20))
        with pytest.raises(DataError, match="magic"):
            dio.read_depth(p)


def tiny_manifest(tmp_path, n=2):
    return sim.make_dataset(n, 7, RIG, PLANE, LAYOUT, str(tmp_path / "ds"), split="train")


class TestSamplesAndManifest:
    def test_sample_round_trip(self, tmp_path):
        man = tiny_manifest(tmp_path)
        left, right, depth, grid, vis = dio.read_sample(man, man.samples[0])
        assert left.shape == (3, 48, 64) and right.shape == (3, 48, 64)
        assert depth.shape == (48, 64)
        assert grid.shape == (16, 16) and vis.shape == (16, 16)
        assert set(np.unique(vis)) <= {0, 1}

    def test_manifest_round_trip(self, tmp_path):
        man = tiny_manifest(tmp_path)
        rd = dio.read_manifest(str(tmp_path / "ds" / "train.json"))
        assert rd.rig == man.rig and rd.plane == man.plane and rd.layout == man.layout
        assert rd.classes == man.classes
        assert [r.id for r in rd.samples] == [r.id for r in man.samples]

    def test_missing_sample_file_detected(self, tmp_path):
        man = tiny_manifest(tmp_path)
        os.unlink(man.resolve(man.samples[1].depth))
        with pytest.raises(DataError, match="missing"):
            dio.read_manifest(str(tmp_path / "ds" / "train.json"))

    def test_unknown_fields_warned_not_fatal(self, tmp_path, caplog):
        import json
        man = tiny_manifest(tmp_path)
        p = str(tmp_path / "ds" / "train.json")
        doc = json.load(open(p))
        doc["extra_field"] = 1
        open(p, "w").write(json.dumps(doc))
        with caplog.at_level("WARNING"):
            dio.read_manifest(p)
        assert "extra_field" in caplog.text

    def test_out_of_range_class_rejected(self, tmp_path):
        man = tiny_manifest(tmp_path)
        rec = man.samples[0]
        g = dio.read_pgm(man.resolve(rec.layout))
        g[0, 0] = 200
        dio.write_pgm(man.resolve(rec.layout), g)
        with pytest.raises(DataError, match="class"):
            dio.read_sample(man, rec)

    def test_palette_size_must_match(self, tmp_path):
        import json
        man = tiny_manifest(tmp_path)
        p = str(tmp_path / "ds" / "train.json")
        doc = json.load(open(p))
        doc["palette"] = doc["palette"][:-1]
        open(p, "w").write(json.dumps(doc))
        with pytest.raises(DataError, match="palette"):
            dio.read_manifest(p)

    def test_load_samples_fraction_is_prefix(self, tmp_path):
        man = sim.make_dataset(4, 3, RIG, PLANE, LAYOUT, str(tmp_path / "ds4"), split="train")
        all_s = dio.load_samples(man)
        half = dio.load_samples(man, fraction=0.5)
        assert [s.id for s in half] == [s.id for s in all_s[:2]]


class TestTensorFile:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        tensors = {
            "a.weight": rng.normal(size=(3, 2, 3, 3)),
            "a.bias": rng.normal(size=3),
            "scalar": np.array(1.4142135623730951),
        }
        p = str(tmp_path / "c.sbvk")
        dio.write_tensor_file(p, tensors)
        back = dio.read_tensor_file(p)
        assert list(back) == list(tensors)
        for k in tensors:
            assert np.array_equal(back[k], np.asarray(tensors[k], dtype=np.float64))
            assert back[k].tobytes() == np.asarray(tensors[k], dtype=np.float64).tobytes()

    def test_bad_magic(self, tmp_path):
        p = str(tmp_path / "c.sbvk")
        open(p, "wb").write(b"XXXX" + bytes(8))
        with pytest.raises(DataError, match="magic"):
            dio.read_tensor_file(p)

    def test_bad_version(self, tmp_path):
        import struct
        p = str(tmp_path / "c.sbvk")
        open(p, "wb").write(b"SBVK" + struct.pack("<II", 99, 0))
        with pytest.raises(DataError, match="version"):
            dio.read_tensor_file(p)

    def test_truncation_rejected(self, tmp_path):
        p = str(tmp_path / "c.sbvk")
        dio.write_tensor_file(p, {"w": np.ones((4, 4))})
        raw = open(p, "rb").read()
        open(p, "wb").write(raw[:-9])
        with pytest.raises(DataError, match="truncated"):
            dio.read_tensor_file(p)

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        p = str(tmp_path / "c.sbvk")
        dio.write_tensor_file(p, {"w": np.ones(3)})
        assert [f for f in os.listdir(tmp_path) if f.startswith(".tmp")] == []
