import numpy as np
import pytest

from splatphys.pointset import (
    NOISE, GeometryError, LabelStore, PlyError, PointSet,
    load_ply, normalize_to_unit_cube, save_frames, save_ply,
)


def write(path, text):
    path.write_bytes(text.encode("ascii"))
    return str(path)


ASCII_3PT = """ply
format ascii 1.0
element vertex 3
property float x
property float y
property float z
end_header
0 0 0
1 0 0
0 1 0
"""


class TestLoad:
    def test_ascii_minimal_defaults(self, tmp_path):
        ps = load_ply(write(tmp_path / "a.ply", ASCII_3PT))
        assert len(ps) == 3
        np.testing.assert_array_equal(
            ps.positions, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
        assert np.all(ps.opacity == 1.0)
        assert np.all(ps.labels == NOISE)
        assert not ps.is_filled.any()

    def test_optional_columns(self, tmp_path):
        text = """ply
format ascii 1.0
element vertex 2
property float x
property float y
property float z
property float opacity
property int label
property uchar is_filled
end_header
0 0 0 0.5 2 0
1 1 1 0 0 1
"""
        ps = load_ply(write(tmp_path / "b.ply", text))
        np.testing.assert_allclose(ps.opacity, [0.5, 0.0])
        np.testing.assert_array_equal(ps.labels, [2, 0])
        np.testing.assert_array_equal(ps.is_filled, [False, True])

    def test_extras_preserved_opaquely(self, tmp_path):
        text = """ply
format ascii 1.0
element vertex 1
property float x
property float y
property float z
property float f_dc_0
property float scale_0
end_header
1 2 3 -0.25 0.125
"""
        ps = load_ply(write(tmp_path / "c.ply", text))
        assert ps.extra_order == ["f_dc_0", "scale_0"]
        assert ps.extras["f_dc_0"][0] == np.float32(-0.25)

    def test_truncated_binary_errors(self, tmp_path):
        header = (b"ply\nformat binary_little_endian 1.0\n"
                  b"element vertex 4\n"
                  b"property float x\nproperty float y\nproperty float z\n"
                  b"end_header\n")
        body = np.zeros((2, 3), dtype="<f4").tobytes()  # 2 of 4 promised
        p = tmp_path / "t.ply"
        p.write_bytes(header + body)
        with pytest.raises(PlyError, match="truncated"):
            load_ply(str(p))

    def test_truncated_ascii_errors(self, tmp_path):
        bad = ASCII_3PT.replace("element vertex 3", "element vertex 5")
        with pytest.raises(PlyError, match="truncated"):
            load_ply(write(tmp_path / "t.ply", bad))

    def test_zero_points_errors(self, tmp_path):
        bad = "".join(ASCII_3PT.splitlines(True)[:7]).replace(
            "element vertex 3", "element vertex 0")
        with pytest.raises(PlyError, match="empty"):
            load_ply(write(tmp_path / "z.ply", bad))

    def test_big_endian_rejected(self, tmp_path):
        bad = ASCII_3PT.replace("format ascii 1.0",
                                "format binary_big_endian 1.0")
        with pytest.raises(PlyError, match="unsupported"):
            load_ply(write(tmp_path / "be.ply", bad))

    def test_malformed_header_names_line(self, tmp_path):
        bad = ASCII_3PT.replace("property float y", "property y")
        with pytest.raises(PlyError, match="property y"):
            load_ply(write(tmp_path / "m.ply", bad))

    def test_missing_coordinate_errors(self, tmp_path):
        bad = ASCII_3PT.replace("property float z\n", "").replace(
            "0 0 0", "0 0").replace("1 0 0", "1 0").replace("0 1 0", "0 1")
        with pytest.raises(PlyError, match="'z'"):
            load_ply(write(tmp_path / "mz.ply", bad))


class TestSave:
    def test_binary_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        pos = rng.uniform(-5, 5, (64, 3)).astype(np.float32)
        ps = PointSet(pos, opacity=rng.uniform(0, 1, 64))
        p1 = tmp_path / "r1.ply"
        save_ply(ps, p1)
        back = load_ply(str(p1))
        # float32 payload read into float64 and written back is identical
        assert np.array_equal(
            back.positions.astype(np.float32), pos)
        p2 = tmp_path / "r2.ply"
        save_ply(back, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_ascii_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        pos = rng.standard_normal((10, 3)).astype(np.float32)
        ps = PointSet(pos)
        p = tmp_path / "a.ply"
        save_ply(ps, p, fmt="ascii")
        back = load_ply(str(p))
        np.testing.assert_allclose(back.positions, pos, rtol=1e-6)

    def test_extras_roundtrip(self, tmp_path):
        ps = PointSet([[1.0, 2.0, 3.0]],
                      extras={"f_dc_0": np.array([0.375], dtype=np.float32)},
                      extra_order=["f_dc_0"])
        p = tmp_path / "e.ply"
        save_ply(ps, p)
        back = load_ply(str(p))
        assert back.extras["f_dc_0"][0] == np.float32(0.375)


class TestPointSet:
    def test_immutable(self):
        ps = PointSet([[0.0, 0.0, 0.0]])
        with pytest.raises(ValueError):
            ps.positions[0, 0] = 1.0

    def test_filled_requires_zero_opacity(self):
        with pytest.raises(ValueError, match="opacity 0"):
            PointSet([[0, 0, 0]], opacity=[0.5], is_filled=[True])

    def test_append_filled_index_stable(self):
        ps = PointSet([[0, 0, 0], [1, 1, 1]], opacity=[0.3, 0.7],
                      labels=[0, 1])
        out = ps.append_filled([[2.0, 2.0, 2.0]], [1])
        assert len(out) == 3 and len(ps) == 2
        np.testing.assert_array_equal(out.positions[:2], ps.positions)
        np.testing.assert_array_equal(out.opacity, [0.3, 0.7, 0.0])
        assert out.is_filled.tolist() == [False, False, True]
        assert out.labels.tolist() == [0, 1, 1]

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            PointSet([[np.nan, 0, 0]])

    def test_label_store_validates_range(self):
        LabelStore(np.array([0, 1, NOISE]), 2)
        with pytest.raises(ValueError):
            LabelStore(np.array([0, 2]), 2)
        with pytest.raises(ValueError):
            LabelStore(np.array([-3]), 1)


class TestNormalize:
    def test_identity_fixed_point(self):
        # already centered at 0.5 with largest extent exactly 0.8
        pos = np.array([[0.1, 0.5, 0.5], [0.9, 0.5, 0.5]])
        out, tf = normalize_to_unit_cube(PointSet(pos))
        np.testing.assert_allclose(out.positions, pos, atol=1e-15)
        assert tf.scale == pytest.approx(1.0)
        np.testing.assert_allclose(tf.offset, 0.0, atol=1e-15)

    def test_centroid_and_extent(self):
        rng = np.random.default_rng(5)
        pos = rng.uniform(10, 30, (200, 3)) * [1.0, 0.2, 0.5]
        out, _ = normalize_to_unit_cube(PointSet(pos))
        np.testing.assert_allclose(out.positions.mean(axis=0), 0.5, atol=1e-12)
        ext = out.positions.max(axis=0) - out.positions.min(axis=0)
        assert np.max(ext) == pytest.approx(0.8, abs=1e-12)

    def test_roundtrip(self):
        rng = np.random.default_rng(6)
        pos = rng.standard_normal((50, 3)) * 40 + 3
        out, tf = normalize_to_unit_cube(PointSet(pos))
        np.testing.assert_allclose(tf.invert(out.positions), pos,
                                   rtol=1e-12, atol=1e-12)

    def test_degenerate_extent_errors(self):
        with pytest.raises(GeometryError, match="degenerate"):
            normalize_to_unit_cube(PointSet(np.ones((4, 3))))


class TestFrames:
    def test_names_and_reload(self, tmp_path):
        rng = np.random.default_rng(9)
        frames = [rng.uniform(0, 1, (20, 3)) for _ in range(12)]
        labels = np.arange(20, dtype=np.int32) % 3
        filled = np.arange(20) % 2 == 0
        paths = save_frames(frames, tmp_path / "out", labels=labels,
                            is_filled=filled)
        assert [p.split("/")[-1] for p in paths[:2]] == \
            ["frame_000.ply", "frame_001.ply"]
        back = load_ply(paths[0])
        # float64 frame dumps reload exactly
        np.testing.assert_array_equal(back.positions, frames[0])
        np.testing.assert_array_equal(back.labels, labels)
        assert np.all(back.opacity[back.is_filled] == 0.0)

    def test_empty_frame_list_errors(self, tmp_path):
        with pytest.raises(ValueError, match="empty frame list"):
            save_frames([], tmp_path / "out")

    def test_150_frame_names(self, tmp_path):
        frames = [np.zeros((1, 3))] * 150
        paths = save_frames(frames, tmp_path / "out")
        assert paths[-1].endswith("frame_149.ply")
        assert len(paths) == 150
