"""Orthographic point-splat rendering and the pre-training triplet builder.

The camera sits on +z looking at the origin; a normalized cloud projects
onto the xy plane, each point covering exactly one pixel. When several
points land on a pixel the nearest (largest z) wins; brightness encodes
nearness so closer surfaces never render darker. The background is white.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DataError
from .geom import PointCloud, rotate_y
from .rng import Rng


@dataclass(frozen=True)
class RenderConfig:
    height: int = 32
    width: int = 32
    shade_floor: float = 0.25  # intensity of the farthest renderable depth
    shade_span: float = 0.75  # intensity = floor + span * nearness
    background: float = 1.0


@dataclass
class ImageRaster:
    data: np.ndarray  # (H, W, 3) float32 in [0, 1]


def render_cloud(cloud: PointCloud, yaw_deg: float, cfg: RenderConfig) -> ImageRaster:
    """Rotate by yaw, project orthographically, splat 1-pixel points.

    Expects a normalized cloud (coordinates inside the unit sphere): the
    nearness rank is (z + 1) / 2, so z spans the shade range exactly.
    """
    rotated = rotate_y(cloud, yaw_deg)
    pts = rotated.points.astype(np.float64)
    h, w = cfg.height, cfg.width
    cols = np.clip(np.floor((pts[:, 0] + 1.0) * 0.5 * w), 0, w - 1).astype(np.int64)
    rows = np.clip(np.floor((1.0 - pts[:, 1]) * 0.5 * h), 0, h - 1).astype(np.int64)
    zbuf = kernels.splat_depth(rows, cols, pts[:, 2], h, w)
    hit = np.isfinite(zbuf)
    rank = np.clip((zbuf + 1.0) * 0.5, 0.0, 1.0)  # empty pixels clip to 0, masked next
    shade = cfg.shade_floor + cfg.shade_span * rank
    img = np.where(hit, shade, cfg.background).astype(np.float32)
    return ImageRaster(np.repeat(img[:, :, None], 3, axis=2))


# PPM golden-file support --------------------------------------------------------


def write_ppm(path: str, raster: ImageRaster):
    """Binary P6, maxval 255; quantization is floor(v * 255 + 0.5)."""
    data = raster.data.astype(np.float64)
    q = np.clip(np.floor(data * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = q.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def read_ppm(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise DataError(f"{path}: not a maxval-255 P6 image")
    w, h = (int(x) for x in parts[1].split())
    pix = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    return pix.reshape(h, w, 3)


# pre-training triplets ----------------------------------------------------------


@dataclass
class Triplet:
    """One pre-training item: a cloud, its y-rotated twin, and the rendered view.

    The image is rendered from the original cloud at yaw theta, which is the
    same view the rotated twin presents to the camera. token_seed drives the
    point tokenizer for both clouds so their patch structures correspond.
    """

    cloud: PointCloud
    rotated: PointCloud
    image: ImageRaster
    theta_deg: float
    token_seed: int


def make_triplet(cloud: PointCloud, rng: Rng, cfg: RenderConfig) -> Triplet:
    theta = float(rng.uniform(0.0, 360.0))
    token_seed = int(rng.integers(2**63 - 1))
    return Triplet(
        cloud=cloud,
        rotated=rotate_y(cloud, theta),
        image=render_cloud(cloud, theta, cfg),
        theta_deg=theta,
        token_seed=token_seed,
    )
