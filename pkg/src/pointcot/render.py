"""Deterministic four-view point-cloud renderer.

Cameras orbit the origin on a turntable. Azimuth is measured clockwise when
viewed from above (+z), so spinning the object counterclockwise by 90
degrees about +z is exactly equivalent to adding 90 degrees of azimuth. The
unit direction from the origin to the camera is::

    (cos(az) * cos(el), -sin(az) * cos(el), sin(el))

The camera sits at a fixed distance and looks at the origin with +z as the
up reference. Orthographic projection maps the in-plane interval [-1, 1] to
the full image width, matching normalized clouds (max point norm 1). Pixel
coordinates follow the half-open convention: a continuous coordinate c is
on-screen iff 0 <= c < image_size.

Trig for azimuth/elevation values that are exact multiples of 90 degrees is
snapped to exact 0/1 so turntable symmetry holds pixel-exact.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .corpus import PointCloud

CAMERA_DISTANCE = 2.5
_WORLD_UP = np.array([0.0, 0.0, 1.0])


class RenderError(ValueError):
    pass


def _trig_deg(angle_deg: float) -> Tuple[float, float]:
    """(cos, sin) with exact values at multiples of 90 degrees."""
    a = angle_deg % 360.0
    exact = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    if a in exact:
        return exact[a]
    rad = math.radians(angle_deg)
    return math.cos(rad), math.sin(rad)


@dataclass(frozen=True)
class CameraSpec:
    azimuth_deg: float
    elevation_deg: float
    projection: str = "orthographic"  # or "perspective"
    fov_deg: float = 60.0
    image_size: int = 512

    def __post_init__(self) -> None:
        if not 0.0 <= self.azimuth_deg < 360.0:
            raise RenderError(f"azimuth {self.azimuth_deg} outside [0, 360)")
        if not -90.0 <= self.elevation_deg <= 90.0:
            raise RenderError(f"elevation {self.elevation_deg} outside [-90, 90]")
        if self.projection not in ("orthographic", "perspective"):
            raise RenderError(f"unknown projection {self.projection!r}")
        if self.projection == "perspective" and not 0.0 < self.fov_deg < 180.0:
            raise RenderError(f"fov {self.fov_deg} outside (0, 180)")
        if self.image_size < 64:
            raise RenderError(f"image_size {self.image_size} below minimum 64")

    def basis(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward, position) in world coordinates."""
        cos_a, sin_a = _trig_deg(self.azimuth_deg)
        cos_e, sin_e = _trig_deg(self.elevation_deg)
        direction = np.array([cos_a * cos_e, -sin_a * cos_e, sin_e])
        forward = -direction
        reference = _WORLD_UP
        if abs(cos_e) < 1e-12:  # looking straight up/down; +x becomes the up reference
            reference = np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, reference)
        right = right / np.linalg.norm(right)
        up = np.cross(right, forward)
        return right, up, forward, direction * CAMERA_DISTANCE


@dataclass(frozen=True)
class RenderConfig:
    azimuths: Tuple[float, ...] = (0.0, 90.0, 180.0, 270.0)
    elevation: float = 20.0
    projection: str = "orthographic"
    fov: float = 60.0
    image_size: int = 512
    splat_radius: int = 2
    background: Tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self) -> None:
        if len(self.azimuths) != 4:
            raise RenderError("exactly 4 viewpoints are required")
        if self.splat_radius < 0:
            raise RenderError("splat_radius must be >= 0")

    def cameras(self) -> Tuple[CameraSpec, ...]:
        return tuple(
            CameraSpec(
                azimuth_deg=float(az) % 360.0,
                elevation_deg=float(self.elevation),
                projection=self.projection,
                fov_deg=float(self.fov),
                image_size=int(self.image_size),
            )
            for az in self.azimuths
        )


@dataclass(frozen=True)
class View:
    camera: CameraSpec
    image: np.ndarray  # (H, W, 3) uint8


@dataclass(frozen=True)
class ViewSet:
    cloud_id: str
    views: Tuple[View, ...]

    def __post_init__(self) -> None:
        if len(self.views) != 4:
            raise RenderError("a view set holds exactly 4 views")
        sizes = {v.image.shape for v in self.views}
        if len(sizes) != 1:
            raise RenderError("all views must share one image size")


def project_point(point: Sequence[float], camera: CameraSpec):
    """Continuous pixel coordinates and depth, or None when off-screen.

    Orthographic: pixel is an affine map of the in-plane camera coordinates,
    depth is the distance along the view axis. Perspective: standard pinhole
    division before the same affine map.
    """
    right, up, forward, position = camera.basis()
    p = np.asarray(point, dtype=np.float64)
    size = camera.image_size
    half = size / 2.0
    if camera.projection == "orthographic":
        u = float(p @ right)
        v = float(p @ up)
        depth = float((p - position) @ forward)
    else:
        rel = p - position
        depth = float(rel @ forward)
        if depth <= 1e-9:  # behind or on the camera plane
            return None
        scale = math.tan(math.radians(camera.fov_deg) / 2.0)
        u = float(rel @ right) / (depth * scale)
        v = float(rel @ up) / (depth * scale)
    x = u * half + half
    y = half - v * half
    if not (0.0 <= x < size and 0.0 <= y < size):
        return None
    return x, y, depth


def _project_all(xyz: np.ndarray, camera: CameraSpec):
    """Vectorized projection of every point; returns (x, y, depth, onscreen)."""
    right, up, forward, position = camera.basis()
    size = camera.image_size
    half = size / 2.0
    if camera.projection == "orthographic":
        u = xyz @ right
        v = xyz @ up
        depth = (xyz - position) @ forward
        onscreen = np.ones(len(xyz), dtype=bool)
    else:
        rel = xyz - position
        depth = rel @ forward
        scale = math.tan(math.radians(camera.fov_deg) / 2.0)
        safe = np.where(depth > 1e-9, depth, 1.0)
        u = (rel @ right) / (safe * scale)
        v = (rel @ up) / (safe * scale)
        onscreen = depth > 1e-9
    x = u * half + half
    y = half - v * half
    onscreen &= (x >= 0.0) & (x < size) & (y >= 0.0) & (y < size)
    return x, y, depth, onscreen


def _disc_offsets(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(span, span)
    keep = dx * dx + dy * dy <= radius * radius
    return np.column_stack([dy[keep], dx[keep]])


def _point_colors(cloud: PointCloud, depth: np.ndarray) -> np.ndarray:
    """Per-point 8-bit colors; uncolored clouds get depth-shaded grayscale."""
    if cloud.rgb is not None:
        return np.clip(np.rint(cloud.rgb * 255.0), 0, 255).astype(np.uint8)
    dmin, dmax = float(depth.min()), float(depth.max())
    if dmax - dmin < 1e-12:
        t = np.zeros_like(depth)
    else:
        t = (depth - dmin) / (dmax - dmin)
    gray = np.rint(255.0 - 191.0 * t).astype(np.uint8)  # near bright, far dark
    return np.repeat(gray[:, None], 3, axis=1)


def render_views(cloud: PointCloud, config: Optional[RenderConfig] = None) -> ViewSet:
    """Render the four configured views of a normalized cloud.

    Points are splatted as filled discs in painter's order (far to near) with
    ties broken by point index, so output bytes are a pure function of the
    cloud and the config.
    """
    config = config or RenderConfig()
    views = []
    for camera in config.cameras():
        size = camera.image_size
        img = np.empty((size, size, 3), dtype=np.uint8)
        img[:, :] = np.array(config.background, dtype=np.uint8)
        x, y, depth, onscreen = _project_all(cloud.xyz, camera)
        colors = _point_colors(cloud, depth)
        order = np.argsort(-depth, kind="stable")  # far to near, stable in point index
        offsets = _disc_offsets(config.splat_radius)
        for idx in order:
            if not onscreen[idx]:
                continue
            cx = int(math.floor(x[idx]))
            cy = int(math.floor(y[idx]))
            rows = offsets[:, 0] + cy
            cols = offsets[:, 1] + cx
            keep = (rows >= 0) & (rows < size) & (cols >= 0) & (cols < size)
            img[rows[keep], cols[keep]] = colors[idx]
        views.append(View(camera=camera, image=img))
    return ViewSet(cloud_id=cloud.cloud_id, views=tuple(views))


def encode_view(view: Union[View, np.ndarray]) -> bytes:
    """Lossless PNG bytes for one rendered view."""
    image = view.image if isinstance(view, View) else view
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def decode_view(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"))


def view_filename(cloud_id: str, index: int) -> str:
    """Canonical on-disk name for view index 1..4."""
    return f"{cloud_id}_v{index}.png"


def render_to_dir(cloud: PointCloud, out_dir: Union[str, Path],
                  config: Optional[RenderConfig] = None) -> list:
    """Render and write the four PNGs; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    viewset = render_views(cloud, config)
    paths = []
    for i, view in enumerate(viewset.views, start=1):
        path = out_dir / view_filename(cloud.cloud_id, i)
        path.write_bytes(encode_view(view))
        paths.append(path)
    return paths


def load_view_bytes(views_dir: Union[str, Path], cloud_id: str) -> list:
    """Read the four encoded views for a cloud from a render directory."""
    views_dir = Path(views_dir)
    blobs = []
    for i in range(1, 5):
        path = views_dir / view_filename(cloud_id, i)
        if not path.exists():
            raise RenderError(f"missing view {path}")
        blobs.append(path.read_bytes())
    return blobs
