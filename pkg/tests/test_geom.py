import json
import os

import numpy as np
import pytest

from pcxp.errors import DataError
from pcxp.geom import (
    CLASS_NAMES,
    PointCloud,
    ShapeSpec,
    farthest_point_sample,
    gen_dataset,
    knn_group,
    load_dataset,
    normalize,
    read_xyz,
    rotate_y,
    synth_shape,
    write_xyz,
)
from pcxp.rng import Rng


def test_normalize_centers_and_scales():
    pts = np.random.default_rng(0).uniform(2.0, 5.0, (50, 3))
    out = normalize(PointCloud(pts))
    r = np.linalg.norm(out.points - out.points.mean(0), axis=1)
    assert abs(out.points.astype(np.float64).mean(0)).max() < 1e-5
    assert abs(r.max() - 1.0) < 1e-5


def test_normalize_rejects_degenerate():
    with pytest.raises(ValueError):
        normalize(PointCloud(np.ones((4, 3))))


def test_rotate_y_preserves_height_and_radius():
    cloud = synth_shape(ShapeSpec(2, 128), Rng(0))
    rot = rotate_y(cloud, 137.0)
    assert np.allclose(rot.points[:, 1], cloud.points[:, 1], atol=1e-6)
    r0 = np.hypot(cloud.points[:, 0], cloud.points[:, 2])
    r1 = np.hypot(rot.points[:, 0], rot.points[:, 2])
    assert np.allclose(r0, r1, atol=1e-5)


def test_rotate_y_360_identity():
    cloud = synth_shape(ShapeSpec(0, 64), Rng(1))
    rot = rotate_y(cloud, 360.0)
    assert np.allclose(rot.points, cloud.points, atol=1e-6)


@pytest.mark.parametrize("cid", range(len(CLASS_NAMES)))
def test_synth_shapes_normalized_and_labeled(cid):
    cloud = synth_shape(ShapeSpec(cid, 256, 0.03, 0.2), Rng(cid))
    assert cloud.points.shape == (256, 3)
    assert cloud.label == cid
    assert cloud.points.dtype == np.float32
    r = np.linalg.norm(cloud.points.astype(np.float64), axis=1)
    assert r.max() <= 1.0 + 1e-5


def test_synth_shape_deterministic():
    a = synth_shape(ShapeSpec(3, 100, 0.01, 0.1), Rng(9).child("s"))
    b = synth_shape(ShapeSpec(3, 100, 0.01, 0.1), Rng(9).child("s"))
    assert np.array_equal(a.points, b.points)


def test_synth_shape_validates():
    with pytest.raises(ValueError):
        synth_shape(ShapeSpec(99, 10), Rng(0))
    with pytest.raises(ValueError):
        synth_shape(ShapeSpec(0, 0), Rng(0))


def test_fps_and_group_shapes():
    cloud = synth_shape(ShapeSpec(1, 256), Rng(2))
    idx = farthest_point_sample(cloud, 16, Rng(3))
    g = knn_group(cloud, idx, 16)
    assert g.groups.shape == (16, 17, 3)
    assert np.array_equal(g.centroids, cloud.points[idx])
    # slot 0 is the centroid itself
    assert np.array_equal(g.groups[:, 0, :], g.centroids)


def test_xyz_roundtrip_exact(tmp_path):
    cloud = synth_shape(ShapeSpec(4, 64, 0.02, 0.1), Rng(5))
    p = str(tmp_path / "c.xyz")
    write_xyz(p, cloud)
    back = read_xyz(p, label=4)
    assert np.array_equal(back.points, cloud.points)  # repr() roundtrips float32
    assert back.label == 4


def test_read_xyz_errors(tmp_path):
    p = str(tmp_path / "bad.xyz")
    with open(p, "w") as fh:
        fh.write("1.0 2.0\n")
    with pytest.raises(DataError):
        read_xyz(p)
    with open(p, "w") as fh:
        fh.write("")
    with pytest.raises(DataError):
        read_xyz(p)
    with pytest.raises(DataError):
        read_xyz(str(tmp_path / "missing.xyz"))


def test_gen_dataset_layout_and_load(tmp_path):
    root = str(tmp_path / "ds")
    gen_dataset(root, seed=3, train_per_class=2, test_per_class=1)
    manifest = json.load(open(os.path.join(root, "manifest.json")))
    ds = load_dataset(root)
    assert ds.seed == 3
    assert tuple(ds.class_names) == CLASS_NAMES
    assert len(ds.split("train")) == 12
    assert len(ds.split("test")) == 6
    labels = {s.label for s in ds.samples}
    assert labels == set(range(6))
    # indices are manifest positions
    assert [s.index for s in ds.samples] == list(range(len(ds.samples)))
    assert len(manifest["samples"]) == 18


def test_gen_dataset_deterministic(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    gen_dataset(a, seed=7, train_per_class=1, test_per_class=1)
    gen_dataset(b, seed=7, train_per_class=1, test_per_class=1)
    da, db = load_dataset(a), load_dataset(b)
    for sa, sb in zip(da.samples, db.samples):
        assert np.array_equal(sa.cloud.points, sb.cloud.points)
    c = str(tmp_path / "c")
    gen_dataset(c, seed=8, train_per_class=1, test_per_class=1)
    dc = load_dataset(c)
    assert not np.array_equal(da.samples[0].cloud.points, dc.samples[0].cloud.points)


def test_load_dataset_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_dataset(str(tmp_path / "nothing"))
