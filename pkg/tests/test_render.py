from __future__ import annotations

import math

import numpy as np
import pytest

from pointcot.corpus import normalize_cloud
from pointcot.render import (
    CAMERA_DISTANCE,
    CameraSpec,
    RenderConfig,
    RenderError,
    decode_view,
    encode_view,
    project_point,
    render_views,
    view_filename,
)

from conftest import random_cloud


# ---------------------------------------------------------------------------
# Independent projection oracle: explicit homogeneous matrix pipeline
# (look-at view matrix, projection, viewport), built with no code shared
# with the implementation.


def _look_at(eye, up_hint):
    f = -eye / np.linalg.norm(eye)  # camera looks at the origin
    s = np.cross(f, up_hint)
    s = s / np.linalg.norm(s)
    u = np.cross(s, f)
    m = np.eye(4)
    m[0, :3], m[1, :3], m[2, :3] = s, u, -f
    m[0, 3], m[1, 3], m[2, 3] = -s @ eye, -u @ eye, f @ eye
    return m


def oracle_project(point, camera: CameraSpec):
    az = math.radians(camera.azimuth_deg)
    el = math.radians(camera.elevation_deg)
    eye = CAMERA_DISTANCE * np.array([
        math.cos(az) * math.cos(el),
        -math.sin(az) * math.cos(el),
        math.sin(el),
    ])
    view = _look_at(eye, np.array([0.0, 0.0, 1.0]))
    cam = view @ np.array([point[0], point[1], point[2], 1.0])
    depth = -cam[2]
    if camera.projection == "orthographic":
        x_ndc, y_ndc = cam[0], cam[1]
    else:
        t = math.tan(math.radians(camera.fov_deg) / 2.0)
        x_ndc = cam[0] / (depth * t)
        y_ndc = cam[1] / (depth * t)
    size = camera.image_size
    x = (x_ndc + 1.0) / 2.0 * size
    y = (1.0 - y_ndc) / 2.0 * size
    return x, y, depth


DEFAULT_CAMERAS = RenderConfig().cameras()


class TestProjection:
    def test_origin_hits_center_any_camera(self):
        for camera in DEFAULT_CAMERAS:
            x, y, depth = project_point((0.0, 0.0, 0.0), camera)
            assert x == pytest.approx(camera.image_size / 2)
            assert y == pytest.approx(camera.image_size / 2)
            assert depth == pytest.approx(CAMERA_DISTANCE)

    def test_azimuth0_point_on_view_axis(self):
        camera = CameraSpec(azimuth_deg=0, elevation_deg=0)
        x, y, depth = project_point((1.0, 0.0, 0.0), camera)
        assert x == pytest.approx(camera.image_size / 2)
        assert y == pytest.approx(camera.image_size / 2)
        assert depth == pytest.approx(CAMERA_DISTANCE - 1.0)

    def test_azimuth90_point_at_full_half_width(self):
        camera = CameraSpec(azimuth_deg=90, elevation_deg=0)
        # In-plane coordinate +1 maps to the right edge: continuous pixel
        # image_size, which the half-open convention calls off-screen.
        assert project_point((1.0, 0.0, 0.0), camera) is None
        x, y, _ = project_point((0.999, 0.0, 0.0), camera)
        offset = x - camera.image_size / 2
        assert offset == pytest.approx(0.999 * camera.image_size / 2)

    def test_frustum_edge_is_offscreen(self):
        camera = CameraSpec(azimuth_deg=0, elevation_deg=0)
        # u = -1 is on-screen (left edge); u = +1 is off-screen.
        assert project_point((0.0, -1.0, 0.0), camera) is not None
        assert project_point((0.0, 1.0, 0.0), camera) is None

    @pytest.mark.parametrize("projection", ["orthographic", "perspective"])
    def test_1000_random_points_match_matrix_oracle(self, projection):
        rng = np.random.default_rng(2024)
        points = rng.uniform(-1.0, 1.0, size=(1000, 3))
        cameras = [
            CameraSpec(azimuth_deg=az, elevation_deg=20.0, projection=projection)
            for az in (0.0, 90.0, 180.0, 270.0)
        ]
        for camera in cameras:
            size = camera.image_size
            for p in points:
                expected = oracle_project(p, camera)
                got = project_point(p, camera)
                ex, ey, ed = expected
                if got is None:
                    assert not (0 <= ex < size and 0 <= ey < size) or \
                        min(abs(ex), abs(ex - size), abs(ey), abs(ey - size)) < 1e-6
                else:
                    assert got[0] == pytest.approx(ex, abs=1e-6)
                    assert got[1] == pytest.approx(ey, abs=1e-6)
                    assert got[2] == pytest.approx(ed, abs=1e-6)

    def test_camera_validation(self):
        with pytest.raises(RenderError):
            CameraSpec(azimuth_deg=360.0, elevation_deg=0)
        with pytest.raises(RenderError):
            CameraSpec(azimuth_deg=0, elevation_deg=91)
        with pytest.raises(RenderError):
            CameraSpec(azimuth_deg=0, elevation_deg=0, image_size=32)


class TestRenderViews:
    def test_single_point_centered_in_all_views(self):
        cloud = normalize_cloud(np.array([[4.0, 4.0, 4.0]]), "dot")
        viewset = render_views(cloud, RenderConfig(image_size=128))
        for view in viewset.views:
            img = view.image
            c = 64
            assert img[c, c].tolist() != [0, 0, 0]

    def test_exactly_four_views(self):
        viewset = render_views(random_cloud("c"), RenderConfig(image_size=64))
        assert len(viewset.views) == 4
        with pytest.raises(RenderError):
            RenderConfig(azimuths=(0.0, 90.0))

    def test_determinism(self):
        cloud = random_cloud("c", seed=5)
        config = RenderConfig(image_size=128)
        a = render_views(cloud, config)
        b = render_views(cloud, config)
        for va, vb in zip(a.views, b.views):
            assert va.image.tobytes() == vb.image.tobytes()

    def test_rotation_consistency(self):
        from pointcot.corpus import PointCloud

        cloud = random_cloud("c", seed=9)
        # +90 degrees about +z, computed exactly: (x, y, z) -> (-y, x, z).
        # Built directly (not re-normalized): the rotation preserves the
        # centroid and every norm bit-exactly.
        rotated_xyz = np.column_stack([-cloud.xyz[:, 1], cloud.xyz[:, 0],
                                       cloud.xyz[:, 2]])
        rotated = PointCloud("c", rotated_xyz, rgb=cloud.rgb, extent=cloud.extent)
        config = RenderConfig(image_size=128)
        base = render_views(cloud, config)
        spun = render_views(rotated, config)
        # Azimuths are (0, 90, 180, 270): spinning the cloud +90 equals
        # advancing the camera one slot.
        for i in range(4):
            assert spun.views[i].image.tobytes() == \
                base.views[(i + 1) % 4].image.tobytes()

    def test_coverage_every_view(self):
        config = RenderConfig(image_size=96)
        for seed in range(5):
            cloud = random_cloud("c", seed=seed, colored=False)
            viewset = render_views(cloud, config)
            for view in viewset.views:
                assert view.image.any(), "no splat landed on-screen"

    def test_uncolored_cloud_grayscale(self):
        cloud = random_cloud("c", colored=False)
        viewset = render_views(cloud, RenderConfig(image_size=96))
        img = viewset.views[0].image
        painted = img[img.any(axis=2)]
        assert (painted[:, 0] == painted[:, 1]).all()
        assert (painted[:, 1] == painted[:, 2]).all()

    def test_background_color(self):
        cloud = normalize_cloud(np.array([[1.0, 0, 0], [-1.0, 0, 0]]), "bg")
        viewset = render_views(cloud, RenderConfig(image_size=64,
                                                   background=(10, 20, 30)))
        corner = viewset.views[0].image[0, 0]
        assert corner.tolist() == [10, 20, 30]

    def test_perspective_rendering(self):
        cloud = random_cloud("p", seed=21)
        config = RenderConfig(image_size=96, projection="perspective", fov=60)
        viewset = render_views(cloud, config)
        for view in viewset.views:
            assert view.camera.projection == "perspective"
            assert view.image.any()
        # Still deterministic.
        again = render_views(cloud, config)
        for a, b in zip(viewset.views, again.views):
            assert a.image.tobytes() == b.image.tobytes()

    def test_ortho_and_perspective_differ(self):
        cloud = random_cloud("d", seed=3)
        ortho = render_views(cloud, RenderConfig(image_size=96))
        persp = render_views(cloud, RenderConfig(image_size=96,
                                                 projection="perspective"))
        assert ortho.views[0].image.tobytes() != persp.views[0].image.tobytes()


class TestEncode:
    def test_all_black_round_trip(self):
        img = np.zeros((64, 64, 3), dtype=np.uint8)
        assert (decode_view(encode_view(img)) == img).all()

    def test_single_white_pixel(self):
        img = np.zeros((16, 16, 3), dtype=np.uint8)
        img[7, 3] = 255
        out = decode_view(encode_view(img))
        assert (out == img).all()

    def test_random_raster_round_trip(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, size=(80, 80, 3), dtype=np.uint8)
        assert (decode_view(encode_view(img)) == img).all()

    def test_encode_deterministic(self):
        cloud = random_cloud("c", seed=11)
        v = render_views(cloud, RenderConfig(image_size=96)).views[0]
        assert encode_view(v) == encode_view(v)

    def test_view_filenames(self):
        assert view_filename("obj1", 3) == "obj1_v3.png"
