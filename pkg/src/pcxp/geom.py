"""Point-cloud geometry: synthetic shapes, sampling ops, dataset on disk.

Clouds are (M, 3) float32 arrays. All randomized construction goes through
Rng so a dataset is reproducible byte-for-byte from its seed. Heavy loops
(farthest-point sampling, kNN) live in kernels.py.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DataError
from .rng import Rng

CLASS_NAMES = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid")


@dataclass
class PointCloud:
    points: np.ndarray  # (M, 3) float32
    label: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"point cloud must be (M, 3) with M >= 1, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts


@dataclass
class PatchGroups:
    """Local neighbourhoods: groups[i, 0] is the centroid, then its k nearest."""

    centroid_indices: np.ndarray  # (n,) int64
    centroids: np.ndarray  # (n, 3) float32
    groups: np.ndarray  # (n, k + 1, 3) float32


@dataclass
class ShapeSpec:
    class_id: int
    n_points: int = 256
    noise_sigma: float = 0.0
    scale_jitter: float = 0.0


# core ops ---------------------------------------------------------------------


def normalize(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale the farthest point onto the unit sphere."""
    pts = cloud.points.astype(np.float64)
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt((centered * centered).sum(axis=1)).max()
    if radius <= 0.0:
        raise ValueError("cannot normalize a degenerate (single-position) cloud")
    return PointCloud((centered / radius).astype(np.float32), cloud.label)


def rotate_y(cloud: PointCloud, theta_deg: float) -> PointCloud:
    """Rotate about the vertical axis; y coordinates are untouched."""
    t = np.deg2rad(float(theta_deg) % 360.0)
    c, s = np.cos(t), np.sin(t)
    pts = cloud.points.astype(np.float64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    out = np.stack([x * c + z * s, y, -x * s + z * c], axis=1)
    return PointCloud(out.astype(np.float32), cloud.label)


def farthest_point_sample(cloud: PointCloud, n: int, rng: Rng) -> np.ndarray:
    """Greedy max-min coverage; the first index is drawn from rng."""
    m = cloud.points.shape[0]
    if n > m:
        raise ValueError(f"cannot sample {n} centroids from {m} points")
    start = int(rng.integers(m))
    return kernels.fps_indices(cloud.points, n, start)


def knn_group(cloud: PointCloud, centroid_indices: np.ndarray, k: int) -> PatchGroups:
    """Attach each centroid's k nearest points (itself eligible, ties by index)."""
    idx = np.asarray(centroid_indices, dtype=np.int64)
    nbr = kernels.knn_indices(cloud.points, idx, k)
    centroids = cloud.points[idx]
    groups = np.concatenate([centroids[:, None, :], cloud.points[nbr]], axis=1)
    return PatchGroups(idx, centroids, groups)


# synthetic shapes --------------------------------------------------------------


def _sphere(rng: Rng, m: int) -> np.ndarray:
    v = rng.normal(size=(m, 3))
    n = np.sqrt((v * v).sum(axis=1, keepdims=True))
    n = np.where(n < 1e-12, 1.0, n)
    return v / n


def _cube(rng: Rng, m: int) -> np.ndarray:
    face = rng.integers(6, size=m)
    uv = rng.uniform(-1.0, 1.0, size=(m, 2))
    out = np.empty((m, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        rest = [i for i in range(3) if i != a]
        mask = axis == a
        out[mask, a] = sign[mask]
        out[mask, rest[0]] = uv[mask, 0]
        out[mask, rest[1]] = uv[mask, 1]
    return out


def _cylinder(rng: Rng, m: int) -> np.ndarray:
    r, hh = 0.5, 1.0
    lat_area = 2.0 * np.pi * r * 2.0 * hh
    cap_area = 2.0 * np.pi * r * r
    pick = rng.uniform(size=m)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=m)
    t = rng.uniform(size=m)
    side = rng.uniform(size=m)
    lateral = pick < lat_area / (lat_area + cap_area)
    out = np.empty((m, 3))
    out[:, 0] = np.cos(phi)
    out[:, 2] = np.sin(phi)
    rho = np.where(lateral, r, r * np.sqrt(t))
    out[:, 0] *= rho
    out[:, 2] *= rho
    out[:, 1] = np.where(lateral, hh * (2.0 * t - 1.0), np.where(side < 0.5, -hh, hh))
    return out


def _cone(rng: Rng, m: int) -> np.ndarray:
    r, h = 0.75, 1.5
    apex_y = 0.75
    slant = np.sqrt(r * r + h * h)
    lat_area = np.pi * r * slant
    base_area = np.pi * r * r
    pick = rng.uniform(size=m)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=m)
    t = np.sqrt(rng.uniform(size=m))  # area-uniform along the slant / disc
    lateral = pick < lat_area / (lat_area + base_area)
    rho = t * r  # same radial law on the slant and on the base disc
    y = np.where(lateral, apex_y - t * h, apex_y - h)
    return np.stack([rho * np.cos(phi), y, rho * np.sin(phi)], axis=1)


def _torus(rng: Rng, m: int) -> np.ndarray:
    big_r, small_r = 0.7, 0.28
    rows = []
    got = 0
    while got < m:
        chunk = max(m, 64)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=chunk)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=chunk)
        w = rng.uniform(size=chunk)
        keep = w <= (big_r + small_r * np.cos(phi)) / (big_r + small_r)
        theta, phi = theta[keep], phi[keep]
        ring = big_r + small_r * np.cos(phi)
        rows.append(np.stack([ring * np.cos(theta), small_r * np.sin(phi), ring * np.sin(theta)], axis=1))
        got += int(keep.sum())
    return np.concatenate(rows, axis=0)[:m]


def _pyramid(rng: Rng, m: int) -> np.ndarray:
    a, h = 0.75, 1.5
    base_y = -0.75
    apex = np.array([0.0, base_y + h, 0.0])
    corners = np.array(
        [[a, base_y, a], [a, base_y, -a], [-a, base_y, -a], [-a, base_y, a]]
    )
    slant = np.sqrt(h * h + a * a)
    face_area = (2.0 * a) * slant / 2.0
    base_area = (2.0 * a) ** 2
    areas = np.array([base_area] + [face_area] * 4)
    cum = np.cumsum(areas / areas.sum())
    pick = rng.uniform(size=m)
    region = np.searchsorted(cum, pick, side="right")
    u = rng.uniform(size=m)
    v = rng.uniform(size=m)
    out = np.empty((m, 3))
    base = region == 0
    out[base, 0] = a * (2.0 * u[base] - 1.0)
    out[base, 1] = base_y
    out[base, 2] = a * (2.0 * v[base] - 1.0)
    for f in range(4):
        mask = region == f + 1
        if not mask.any():
            continue
        b, c = corners[f], corners[(f + 1) % 4]
        uu, vv = u[mask], v[mask]
        flip = uu + vv > 1.0
        uu = np.where(flip, 1.0 - uu, uu)
        vv = np.where(flip, 1.0 - vv, vv)
        out[mask] = apex + uu[:, None] * (b - apex) + vv[:, None] * (c - apex)
    return out


_SAMPLERS = (_sphere, _cube, _cylinder, _cone, _torus, _pyramid)


def synth_shape(spec: ShapeSpec, rng: Rng) -> PointCloud:
    """Sample a noisy surface, jitter each axis independently, normalize.

    The jitter is anisotropic on purpose: a uniform scale would be erased
    by the unit-sphere normalization.
    """
    if not 0 <= spec.class_id < len(CLASS_NAMES):
        raise ValueError(f"class_id {spec.class_id} out of range")
    if spec.n_points < 1:
        raise ValueError("n_points must be positive")
    pts = _SAMPLERS[spec.class_id](rng, spec.n_points)
    scale = rng.uniform(1.0 - spec.scale_jitter, 1.0 + spec.scale_jitter, size=3)
    pts = pts * scale
    pts = pts + rng.normal(0.0, 1.0, size=pts.shape) * spec.noise_sigma
    return normalize(PointCloud(pts.astype(np.float32), spec.class_id))


# dataset on disk ----------------------------------------------------------------


def write_xyz(path: str, cloud: PointCloud):
    lines = [f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}" for p in cloud.points]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_xyz(path: str, label: int | None = None) -> PointCloud:
    try:
        with open(path) as fh:
            raw = fh.read()
    except OSError as e:
        raise DataError(f"cannot read point cloud {path}: {e}") from e
    rows = []
    for ln, line in enumerate(raw.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        cells = line.split()
        if len(cells) != 3:
            raise DataError(f"{path}:{ln}: expected 3 coordinates, got {len(cells)}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError as e:
            raise DataError(f"{path}:{ln}: bad float") from e
    if not rows:
        raise DataError(f"{path}: empty point cloud")
    arr = np.asarray(rows, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise DataError(f"{path}: non-finite coordinates")
    return PointCloud(arr, label)


@dataclass
class Sample:
    cloud: PointCloud
    label: int
    split: str
    path: str
    index: int  # position in manifest order; stable id for seeding


@dataclass
class Dataset:
    root: str
    seed: int
    class_names: tuple
    samples: list

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]


def gen_dataset(
    out_dir: str,
    seed: int,
    train_per_class: int = 100,
    test_per_class: int = 20,
    n_points: int = 512,
    noise_sigma: float = 0.02,
    scale_jitter: float = 0.2,
) -> str:
    """Write one .xyz file per sample plus manifest.json; returns the manifest path.

    Every byte is a pure function of the arguments.
    """
    root = Rng(seed)
    entries = []
    for split, per_class in (("train", train_per_class), ("test", test_per_class)):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        for cid, cname in enumerate(CLASS_NAMES):
            for i in range(per_class):
                rng = root.child(split, cid, i)
                spec = ShapeSpec(cid, n_points, noise_sigma, scale_jitter)
                cloud = synth_shape(spec, rng)
                rel = f"{split}/{cname}_{i:03d}.xyz"
                write_xyz(os.path.join(out_dir, rel), cloud)
                entries.append({"path": rel, "label": cid, "split": split})
    manifest = {
        "seed": seed,
        "class_names": list(CLASS_NAMES),
        "n_points": n_points,
        "noise_sigma": noise_sigma,
        "scale_jitter": scale_jitter,
        "samples": entries,
    }
    mpath = os.path.join(out_dir, "manifest.json")
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return mpath


def load_dataset(root_dir: str) -> Dataset:
    mpath = os.path.join(root_dir, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except OSError as e:
        raise DataError(f"missing manifest: {mpath}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed manifest {mpath}: {e}") from e
    for key in ("seed", "class_names", "samples"):
        if key not in manifest:
            raise DataError(f"manifest {mpath} lacks '{key}'")
    names = tuple(manifest["class_names"])
    samples = []
    for i, entry in enumerate(manifest["samples"]):
        label = int(entry["label"])
        if not 0 <= label < len(names):
            raise DataError(f"manifest sample {i}: label {label} out of range")
        if entry["split"] not in ("train", "test"):
            raise DataError(f"manifest sample {i}: unknown split {entry['split']!r}")
        cloud = read_xyz(os.path.join(root_dir, entry["path"]), label)
        samples.append(Sample(cloud, label, entry["split"], entry["path"], i))
    if not samples:
        raise DataError(f"manifest {mpath} lists no samples")
    return Dataset(root_dir, int(manifest["seed"]), names, samples)
