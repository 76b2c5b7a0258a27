import filecmp
import json

import numpy as np
import pytest

from densepcr import data
from densepcr.pointset import coverage_radius


def dir_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_unit_box_topology():
    mesh = data.generate_shape("box", dict(sx=1.0, sy=1.0, sz=1.0))
    assert mesh.vertices.shape == (8, 3) and mesh.triangles.shape == (12, 3)


def test_sphere_radius():
    mesh = data.generate_shape("ellipsoid", dict(a=0.4, b=0.4, c=0.4))
    assert np.linalg.norm(mesh.vertices, axis=1).max() == pytest.approx(0.4, rel=1e-12)


@pytest.mark.parametrize("kind", data.KINDS)
def test_shapes_are_deterministic_and_closed(kind):
    a, b = data.generate_shape(kind, seed=11), data.generate_shape(kind, seed=11)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.triangles, b.triangles)
    # closed surface: every undirected edge is shared by exactly two triangles
    edges = np.sort(np.concatenate([a.triangles[:, [0, 1]], a.triangles[:, [1, 2]], a.triangles[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_invalid_shape_params():
    with pytest.raises(ValueError):
        data.generate_shape("cylinder", dict(radius=0.0))
    with pytest.raises(ValueError):
        data.generate_shape("pyramid")


def test_view_azimuths():
    az = data.view_azimuths(24)
    assert np.allclose(np.diff(az), 15.0) and az[0] == 0.0


def test_sphere_silhouettes_equal():
    sphere = data.generate_shape("ellipsoid", dict(a=0.5, b=0.5, c=0.5, n_lon=48, n_lat=24))
    counts = [int((im != data.BACKGROUND).any(axis=0).sum()) for im in data.render_views(sphere, 24, 64)]
    assert max(counts) - min(counts) <= 0.01 * np.mean(counts)


def test_render_background_and_range():
    img = data.render_view(data.generate_shape("torus", seed=2), 30.0, 32)
    assert np.all(np.isfinite(img)) and img.min() >= 0 and img.max() <= 1
    # corner pixels are outside every shape, and so is the torus hole seen from above
    assert np.all(img[:, 0, 0] == data.BACKGROUND)
    top = data.render_view(data.generate_shape("torus", dict(major=0.6, minor=0.15)), 0.0, 33, elevation_deg=90)
    assert np.all(top[:, 16, 16] == data.BACKGROUND)


def test_gt_ladder():
    mesh = data.generate_shape("table", seed=3)
    sparse, mid, dense, _ = data.build_gt_ladder(mesh, 16, seed=3)
    assert (len(sparse), len(mid), len(dense)) == (16, 64, 256)
    lo, hi = dense.min(0), dense.max(0)
    assert (hi - lo).max() == pytest.approx(1.0, abs=1e-6)
    for cloud in (sparse, mid):
        assert np.all(cloud.min(0) >= lo) and np.all(cloud.max(0) <= hi)
    ref = data.sample_mesh_surface(mesh.transformed(*data.build_gt_ladder(mesh, 16, seed=3)[3]), 4000,
                                   seed=0, oversample=1)
    # distance from the worst-covered surface sample to each cloud
    cover = lambda cloud: coverage_radius(np.vstack([cloud, ref]), np.arange(len(cloud)))  # noqa: E731
    assert cover(sparse) >= cover(mid) >= cover(dense)


def test_paper_ladder_sizes():
    mesh = data.generate_shape("box", seed=0)
    sparse, mid, dense, _ = data.build_gt_ladder(mesh, 1024, seed=0, oversample=1)
    assert (len(sparse), len(mid), len(dense)) == (1024, 4096, 16384)


def test_pcb_round_trip(tmp_path, rng):
    pts = rng.normal(size=(37, 3)).astype(np.float32).astype(np.float64)
    data.write_pcb(tmp_path / "a.pcb", pts)
    raw = (tmp_path / "a.pcb").read_bytes()
    assert raw[:4] == b"PCB1" and int.from_bytes(raw[4:8], "little") == 37 and len(raw) == 8 + 37 * 12
    assert np.array_equal(data.read_pcb(tmp_path / "a.pcb"), pts)


def test_ppm_round_trip(tmp_path, rng):
    img = data.quantize_image(rng.random((3, 5, 7)))
    data.write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(data.read_ppm(tmp_path / "a.ppm"), img)


def test_ply_round_trip(tmp_path, rng):
    pts = rng.normal(size=(9, 3))
    data.write_ply(tmp_path / "a.ply", pts)
    lines = (tmp_path / "a.ply").read_text().splitlines()
    assert lines[:3] == ["ply", "format ascii 1.0", "element vertex 9"]
    np.testing.assert_allclose(data.read_ply(tmp_path / "a.ply"), pts, rtol=1e-8)


def test_split_census():
    ids = [f"shape_{i:04d}" for i in range(100)]
    splits = data.assign_splits(ids)
    assert abs(sum(v == "train" for v in splits.values()) - 80) <= 1
    assert data.assign_splits(list(reversed(ids))) == splits


def test_dataset_round_trip(small_dataset):
    man = small_dataset
    sid = man.ids()[0]
    entry = man.entry(sid)
    sample = data.load_sample(man, sid, 1)
    assert np.array_equal(sample.gt_dense, data.read_pcb(man.root / entry["gt"]["dense"]["path"]))
    assert sample.image.shape == (3, 16, 16) and sample.azimuth == 180.0
    assert (len(sample.gt_sparse), len(sample.gt_mid), len(sample.gt_dense)) == (16, 64, 256)
    assert set(man.ids("train")) | set(man.ids("test")) == set(man.ids())


def test_dataset_is_byte_identical(tmp_path):
    data.generate_dataset(tmp_path / "a", 2, base_n=8, views=3, image_size=16, seed=4)
    data.generate_dataset(tmp_path / "b", 2, base_n=8, views=3, image_size=16, seed=4)
    assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")
    data.generate_dataset(tmp_path / "c", 2, base_n=8, views=3, image_size=16, seed=5)
    assert not filecmp.cmp(tmp_path / "a" / "shape_0000" / "gt_dense.pcb",
                           tmp_path / "c" / "shape_0000" / "gt_dense.pcb", shallow=False)


def test_missing_file_is_named(tmp_path):
    data.generate_dataset(tmp_path, 1, base_n=8, views=2, image_size=16, seed=0)
    victim = tmp_path / "shape_0000" / "gt_mid.pcb"
    victim.unlink()
    with pytest.raises(data.DatasetError, match=str(victim)):
        data.load_sample(data.load_manifest(tmp_path), "shape_0000")


def test_checksum_mismatch(tmp_path):
    data.generate_dataset(tmp_path, 1, base_n=8, views=2, image_size=16, seed=0)
    img = tmp_path / "shape_0000" / "view_01.ppm"
    raw = bytearray(img.read_bytes())
    raw[-1] ^= 0xFF
    img.write_bytes(bytes(raw))
    with pytest.raises(data.DatasetError, match="checksum"):
        data.load_image(data.load_manifest(tmp_path), "shape_0000", 1)


def test_manifest_fields(small_dataset):
    payload = json.loads((small_dataset.root / "manifest.json").read_text())
    assert payload["views"] == 2 and payload["base_n"] == 16
    assert {s["category"] for s in payload["samples"]} <= set(data.KINDS)
