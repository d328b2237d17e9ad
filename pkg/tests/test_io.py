import json
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from qreg.core import Correspondences, PointCloud, RigidTransform
from qreg.errors import ConfigError, ParseError
from qreg.estimator import EstimatorConfig, qreg_register
from qreg.io import (
    UnsupportedPropertyWarning,
    format_config,
    parse_config_text,
    read_cloud,
    read_config,
    read_correspondences,
    read_report,
    read_transform,
    write_cloud,
    write_config,
    write_correspondences,
    write_report,
    write_transform,
)
from qreg.synth import SceneSpec, generate

from conftest import random_rigid

FORMATS = [("ply_binary", "c.ply"), ("ply_ascii", "c.ply"), ("xyz", "c.xyz")]


def ply_bytes(header_lines, body: bytes = b"") -> bytes:
    return ("\n".join(["ply", *header_lines, "end_header"]) + "\n").encode() + body


class TestClouds:
    def test_three_point_xyz(self, tmp_path):
        f = tmp_path / "a.xyz"
        f.write_text("# comment\n1 2 3\n\n4 5 6\n7 8 9\n")
        np.testing.assert_array_equal(read_cloud(f).points, [[1, 2, 3], [4, 5, 6], [7, 8, 9]])

    @pytest.mark.parametrize("fmt,name", FORMATS)
    def test_round_trip_bit_identical(self, tmp_path, rng, fmt, name):
        pts = rng.normal(scale=100.0, size=(10_000 if fmt == "ply_binary" else 500, 3))
        write_cloud(PointCloud(pts), tmp_path / name, fmt)
        got = read_cloud(tmp_path / name, fmt)
        assert got.points.tobytes() == np.ascontiguousarray(pts).tobytes()
        assert got.normals is None

    @pytest.mark.parametrize("fmt,name", FORMATS)
    def test_normals_preserved(self, tmp_path, rng, fmt, name):
        cloud = PointCloud(rng.normal(size=(50, 3)), rng.normal(size=(50, 3)))
        write_cloud(cloud, tmp_path / name, fmt)
        got = read_cloud(tmp_path / name)
        np.testing.assert_array_equal(got.points, cloud.points)
        np.testing.assert_allclose(got.normals, cloud.normals, atol=1e-15)

    @pytest.mark.parametrize("fmt,name", FORMATS)
    def test_empty_cloud(self, tmp_path, fmt, name):
        write_cloud(PointCloud(np.empty((0, 3))), tmp_path / name, fmt)
        assert len(read_cloud(tmp_path / name, fmt)) == 0

    def test_format_detected_from_header(self, tmp_path, rng):
        write_cloud(PointCloud(rng.normal(size=(5, 3))), tmp_path / "a.ply", "ply_ascii")
        assert b"format ascii" in (tmp_path / "a.ply").read_bytes()
        assert len(read_cloud(tmp_path / "a.ply")) == 5

    def test_truncated_binary_reports_offset(self, tmp_path, rng):
        f = tmp_path / "t.ply"
        write_cloud(PointCloud(rng.normal(size=(10, 3))), f)
        data = f.read_bytes()
        f.write_bytes(data[:-7])
        with pytest.raises(ParseError) as info:
            read_cloud(f)
        assert info.value.offset == len(data) - 7

    def test_bad_xyz_reports_line(self, tmp_path):
        f = tmp_path / "b.xyz"
        f.write_text("1 2 3\n4 five 6\n")
        with pytest.raises(ParseError) as info:
            read_cloud(f)
        assert info.value.offset == 2

    def test_float32_with_extra_properties_and_faces(self, tmp_path):
        dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1")])
        verts = np.array([(1, 2, 3, 255), (4, 5, 6, 0)], dtype=dtype).tobytes()
        faces = np.array([3], "u1").tobytes() + np.array([0, 1, 1], "<i4").tobytes()
        header = [
            "format binary_little_endian 1.0",
            "comment made by hand",
            "element vertex 2",
            "property float x",
            "property float y",
            "property float z",
            "property uchar red",
            "element face 1",
            "property list uchar int vertex_indices",
        ]
        f = tmp_path / "f.ply"
        f.write_bytes(ply_bytes(header, verts + faces))
        with pytest.warns(UnsupportedPropertyWarning, match="red"):
            cloud = read_cloud(f)
        np.testing.assert_array_equal(cloud.points, [[1, 2, 3], [4, 5, 6]])

    def test_list_element_before_vertices(self, tmp_path):
        header = [
            "format binary_big_endian 1.0",
            "element face 2",
            "property list uchar int vertex_indices",
            "element vertex 1",
            "property double x",
            "property double y",
            "property double z",
        ]
        body = b"\x01" + np.array([7], ">i4").tobytes() + b"\x02" + np.array([1, 2], ">i4").tobytes()
        body += np.array([1.5, -2.5, 3.5], ">f8").tobytes()
        f = tmp_path / "g.ply"
        f.write_bytes(ply_bytes(header, body))
        np.testing.assert_array_equal(read_cloud(f).points, [[1.5, -2.5, 3.5]])

    @pytest.mark.parametrize(
        "header",
        [
            ["format binary_little_endian 1.0", "element vertex 1", "property double x"],
            ["format ascii 2.0"],
            ["format ascii 1.0", "element vertex 1", "property quad x"],
            ["format ascii 1.0", "element vertex -1"],
            ["format ascii 1.0", "property float x"],
        ],
    )
    def test_malformed_headers(self, tmp_path, header):
        f = tmp_path / "h.ply"
        f.write_bytes(ply_bytes(header, b"1 2 3\n"))
        with pytest.raises(ParseError):
            read_cloud(f)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            read_cloud(tmp_path / "nope.ply")

    @settings(max_examples=300, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.binary(max_size=400), st.sampled_from(["ply_binary", "ply_ascii", "xyz"]))
    def test_fuzz_random_bytes(self, tmp_path, data, fmt):
        f = tmp_path / "fuzz.bin"
        f.write_bytes(data)
        try:
            read_cloud(f, fmt)
        except ParseError:
            pass

    @settings(max_examples=300, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.data())
    def test_fuzz_mutated_valid_files(self, tmp_path, data):
        pts = np.arange(12.0).reshape(4, 3)
        fmt = data.draw(st.sampled_from(["ply_binary", "ply_ascii"]))
        f = tmp_path / "m.ply"
        write_cloud(PointCloud(pts, pts + 1), f, fmt)
        raw = bytearray(f.read_bytes())
        for _ in range(data.draw(st.integers(1, 5))):
            i = data.draw(st.integers(0, len(raw) - 1))
            raw[i] = data.draw(st.integers(0, 255))
        cut = data.draw(st.integers(0, len(raw)))
        f.write_bytes(bytes(raw[:cut]))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UnsupportedPropertyWarning)
            try:
                read_cloud(f)
            except ParseError:
                pass


class TestCorrespondences:
    def test_round_trip(self, tmp_path, rng):
        c = Correspondences.from_pairs(rng.integers(0, 1000, 50), rng.integers(0, 1000, 50), rng.uniform(size=50))
        write_correspondences(c, tmp_path / "c.csv")
        got = read_correspondences(tmp_path / "c.csv")
        np.testing.assert_array_equal(got.source, c.source)
        np.testing.assert_array_equal(got.target, c.target)
        assert got.score.tobytes() == c.score.tobytes()

    def test_header_only(self, tmp_path):
        (tmp_path / "c.csv").write_text("src,dst,score\n")
        assert len(read_correspondences(tmp_path / "c.csv")) == 0

    def test_missing_score_defaults_to_one(self, tmp_path):
        (tmp_path / "c.csv").write_text("src,dst\n0,5\n3,2\n")
        c = read_correspondences(tmp_path / "c.csv")
        assert c.score.tolist() == [1.0, 1.0] and c.target.tolist() == [5, 2]

    def test_indices_not_bounds_checked_on_read(self, tmp_path):
        (tmp_path / "c.csv").write_text("src,dst\n999999,0\n")
        assert read_correspondences(tmp_path / "c.csv").source[0] == 999999

    @pytest.mark.parametrize(
        "text,line",
        [
            ("a,b\n0,1\n", 1),
            ("src,dst,score\n0,1\n", 2),
            ("src,dst\n0,x\n", 2),
            ("src,dst\n-1,2\n", 2),
            ("src,dst,score\n0,1,1.5\n", 2),
            ("", 1),
        ],
    )
    def test_malformed(self, tmp_path, text, line):
        (tmp_path / "c.csv").write_text(text)
        with pytest.raises(ParseError) as info:
            read_correspondences(tmp_path / "c.csv")
        assert info.value.offset == line

    @settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.binary(max_size=200))
    def test_fuzz(self, tmp_path, data):
        (tmp_path / "c.csv").write_bytes(data)
        try:
            read_correspondences(tmp_path / "c.csv")
        except ParseError:
            pass


class TestTransform:
    def test_identity_rows(self, tmp_path):
        write_transform(RigidTransform.identity(), tmp_path / "t.txt")
        assert (tmp_path / "t.txt").read_text() == "1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n"

    @given(st.integers(0, 2**31))
    @settings(deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    def test_round_trip_zero_ulp(self, tmp_path, seed):
        t = random_rigid(np.random.default_rng(seed), 100.0)
        write_transform(t, tmp_path / "t.txt")
        assert read_transform(tmp_path / "t.txt").as_matrix().tobytes() == t.as_matrix().tobytes()

    @pytest.mark.parametrize("text", ["1 0 0\n", "1 0 0 0\n" * 3, "a b c d\n" * 4, "2 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n"])
    def test_malformed(self, tmp_path, text):
        (tmp_path / "t.txt").write_text(text)
        with pytest.raises(ParseError):
            read_transform(tmp_path / "t.txt")


def test_report_echoes_config(tmp_path):
    scene = generate(SceneSpec(seed=0, n_correspondences=20))
    cfg = EstimatorConfig(inlier_threshold=0.05)
    report = qreg_register(scene.correspondences, scene.clouds, cfg=cfg)
    write_report(report, tmp_path / "r.json", note="hello")
    d = read_report(tmp_path / "r.json")
    assert d["config"] == json.loads(json.dumps(cfg.to_dict()))
    assert d["method"] == "qreg" and d["note"] == "hello"
    assert np.array_equal(np.array(d["best_transform"]), report.best_transform.as_matrix())
    assert d["inlier_count"] == report.inlier_count


class TestConfig:
    def test_literals_and_comments(self):
        text = "# settings\ninlier_threshold = 0.05\nscale_bounds = (0.8, 1.2)\nmethod = ransac(500)\nflag = true\n"
        d = parse_config_text(text)
        assert d == {"inlier_threshold": 0.05, "scale_bounds": (0.8, 1.2), "method": "ransac(500)", "flag": True}

    def test_scene_spec_round_trip(self, tmp_path):
        spec = SceneSpec(seed=3, noise_sigma=0.01, axis_ratio_range=(1.5, 2.5))
        write_config(spec.to_dict(), tmp_path / "s.cfg")
        assert SceneSpec.from_dict(read_config(tmp_path / "s.cfg")) == spec

    def test_format_is_stable(self):
        assert format_config({"a": 1, "b": [1.5, "x"]}) == "a = 1\nb = [1.5, 'x']\n"

    def test_duplicate_keys_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("a = 1\na = 2\n")
