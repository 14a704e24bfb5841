import logging

import numpy as np
import pytest

from chartatlas.atlas import DenseSample
from chartatlas.geometry import PointCloud
from chartatlas.plyio import CloudFormatError, read_cloud, read_mesh, read_ply, write_cloud


def dense(n, seed=0):
    rng = np.random.default_rng(seed)
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return DenseSample(
        rng.normal(size=(n, 3)),
        nrm,
        rng.uniform(size=(n, 2)),
        rng.integers(0, 7, size=n).astype(np.int32),
        rng.uniform(size=n),
    )


def test_xyz_three_lines(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("0 0 0\n1 0 0\n0 1 0.5\n")
    cloud = read_cloud(p)
    assert len(cloud) == 3 and cloud.normals is None
    np.testing.assert_array_equal(cloud.points[2], [0, 1, 0.5])


def test_xyz_with_normals_and_comments(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("# header\n0 0 0 0 0 2\n\n1 0 0 3 0 0\n")
    cloud = read_cloud(p)
    np.testing.assert_array_equal(cloud.normals, [[0, 0, 1], [1, 0, 0]])


@pytest.mark.parametrize(
    "body, where",
    [("0 0 0\n1 2\n", ":2:"), ("0 0 0\n1 2 x\n", ":2:"), ("0 0 nan\n", ":1:"), ("0 0 0\n1 1 1 0 0 1\n", ":2:")],
)
def test_xyz_errors_name_the_line(tmp_path, body, where):
    p = tmp_path / "bad.xyz"
    p.write_text(body)
    with pytest.raises(CloudFormatError, match=where):
        read_cloud(p)


def test_ascii_ply_normals_renormalized(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\nend_header\n"
        "0 0 0 0 0 5\n1 1 1 0.5 0 0\n"
    )
    cloud = read_cloud(p)
    np.testing.assert_allclose(cloud.normals, [[0, 0, 1], [1, 0, 0]])


def test_binary_float32_ply(tmp_path):
    p = tmp_path / "f.ply"
    pts = np.random.default_rng(0).normal(size=(10, 3)).astype("<f4")
    head = "ply\nformat binary_little_endian 1.0\nelement vertex 10\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
    p.write_bytes(head.encode() + pts.tobytes())
    np.testing.assert_array_equal(read_cloud(p).points, pts.astype(np.float64))


def test_count_mismatch(tmp_path):
    p = tmp_path / "short.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n")
    with pytest.raises(CloudFormatError, match="3"):
        read_cloud(p)
    q = tmp_path / "short_bin.ply"
    head = "ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty double x\nproperty double y\nproperty double z\nend_header\n"
    q.write_bytes(head.encode() + np.zeros(8, "<f8").tobytes())
    with pytest.raises(CloudFormatError):
        read_cloud(q)


def test_malformed_headers(tmp_path):
    p = tmp_path / "h.ply"
    p.write_text("plx\n")
    with pytest.raises(CloudFormatError, match="magic"):
        read_cloud(p)
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n")
    with pytest.raises(CloudFormatError, match="end_header"):
        read_cloud(p)
    p.write_text("ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(CloudFormatError, match="big"):
        read_cloud(p)


def test_unknown_extension(tmp_path):
    p = tmp_path / "a.obj"
    p.write_text("v 0 0 0\n")
    with pytest.raises(CloudFormatError):
        read_cloud(p)


def test_binary_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    n = rng.normal(size=(50, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    cloud = PointCloud(rng.normal(size=(50, 3)) * 1e3, n)
    write_cloud(cloud, tmp_path / "c.ply")
    back = read_cloud(tmp_path / "c.ply")
    np.testing.assert_array_equal(back.points, cloud.points)
    np.testing.assert_allclose(back.normals, cloud.normals, rtol=0, atol=1e-15)


def test_ascii_round_trip_within_print_precision(tmp_path):
    cloud = PointCloud(np.random.default_rng(2).uniform(-1, 1, size=(30, 3)))
    write_cloud(cloud, tmp_path / "c.ply", binary=False)
    np.testing.assert_allclose(read_cloud(tmp_path / "c.ply").points, cloud.points, rtol=0, atol=1e-6)


def test_xyz_round_trip(tmp_path):
    cloud = PointCloud(np.random.default_rng(3).normal(size=(20, 3)))
    write_cloud(cloud, tmp_path / "c.xyz")
    np.testing.assert_array_equal(read_cloud(tmp_path / "c.xyz").points, cloud.points)


def test_dense_sample_properties(tmp_path):
    d = dense(4)
    write_cloud(d, tmp_path / "d.ply")
    raw = (tmp_path / "d.ply").read_bytes()
    head = raw[: raw.index(b"end_header")].decode()
    assert "element vertex 4" in head
    assert head.count("property double") == 9
    assert head.count("property int") == 1
    doc = read_ply(tmp_path / "d.ply")["vertex"]
    np.testing.assert_array_equal(doc["u"], d.uv[:, 0])
    np.testing.assert_array_equal(doc["v"], d.uv[:, 1])
    np.testing.assert_array_equal(doc["residual"], d.residual)
    np.testing.assert_array_equal(doc["patch_id"], d.patch_id)
    back = read_cloud(tmp_path / "d.ply")
    np.testing.assert_array_equal(back.points, d.points)


def test_dense_sample_ascii(tmp_path):
    d = dense(5, seed=4)
    write_cloud(d, tmp_path / "d.ply", binary=False)
    doc = read_ply(tmp_path / "d.ply")["vertex"]
    np.testing.assert_array_equal(doc["patch_id"], d.patch_id)
    np.testing.assert_allclose(doc["u"], d.uv[:, 0], atol=1e-8)


def test_empty_dense_sample_rejected(tmp_path):
    with pytest.raises(CloudFormatError):
        write_cloud(dense(0), tmp_path / "e.ply")


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        write_cloud(dense(3), tmp_path / "missing" / "dir" / "x.ply")


def test_mesh_faces_skipped_by_cloud_reader(tmp_path, caplog):
    p = tmp_path / "m.ply"
    p.write_text(
        "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\n"
        "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
        "0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"
    )
    with caplog.at_level(logging.WARNING):
        cloud = read_cloud(p)
    assert len(cloud) == 4
    assert "face" in caplog.text
    verts, tris = read_mesh(p)
    np.testing.assert_array_equal(tris, [[0, 1, 2], [0, 2, 3]])
    assert verts.shape == (4, 3)


def test_binary_mesh(tmp_path):
    p = tmp_path / "m.ply"
    head = (
        "ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty double x\nproperty double y\n"
        "property double z\nelement face 1\nproperty list uchar uint vertex_indices\nend_header\n"
    )
    verts = np.eye(3)
    face = np.array([3], "<u1").tobytes() + np.array([0, 1, 2], "<u4").tobytes()
    p.write_bytes(head.encode() + verts.astype("<f8").tobytes() + face)
    v, t = read_mesh(p)
    np.testing.assert_array_equal(v, verts)
    np.testing.assert_array_equal(t, [[0, 1, 2]])
