from __future__ import annotations

import numpy as np
import pytest

from pointcot.corpus import CorpusError
from pointcot.pcio import (
    CloudFormatError,
    CloudStore,
    load_ply,
    load_raw_f32,
    save_ply,
    save_raw_f32,
)


@pytest.fixture
def raw_points():
    rng = np.random.default_rng(42)
    return rng.normal(size=(50, 3)) * 3.0, rng.uniform(size=(50, 3))


def test_ascii_ply_round_trip(tmp_path, raw_points):
    xyz, rgb = raw_points
    path = tmp_path / "a.ply"
    save_ply(xyz, path, colors=rgb, binary=False)
    cloud = load_ply(path)
    assert cloud.cloud_id == "a"
    assert cloud.n_points == 50
    assert cloud.rgb is not None
    # Normalization applied on load.
    assert np.linalg.norm(cloud.xyz.mean(axis=0)) < 1e-6
    assert abs(np.linalg.norm(cloud.xyz, axis=1).max() - 1.0) < 1e-6


def test_binary_ply_matches_ascii(tmp_path, raw_points):
    xyz, rgb = raw_points
    save_ply(xyz, tmp_path / "a.ply", colors=rgb, binary=False)
    save_ply(xyz, tmp_path / "b.ply", colors=rgb, binary=True)
    a = load_ply(tmp_path / "a.ply")
    b = load_ply(tmp_path / "b.ply")
    # float32 quantization in both encodings; compare loosely.
    assert np.allclose(a.xyz, b.xyz, atol=1e-5)
    assert np.allclose(a.rgb, b.rgb)


def test_uncolored_ply(tmp_path, raw_points):
    xyz, _ = raw_points
    save_ply(xyz, tmp_path / "g.ply")
    cloud = load_ply(tmp_path / "g.ply")
    assert cloud.rgb is None


def test_raw_f32_round_trip(tmp_path, raw_points):
    xyz, rgb = raw_points
    path = tmp_path / "cloud.bin"
    save_raw_f32(xyz, rgb, "cloud-7", path)
    cloud = load_raw_f32(path)
    assert cloud.cloud_id == "cloud-7"
    assert cloud.n_points == 50
    assert cloud.rgb is not None


def test_raw_f32_missing_sidecar(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"\x00" * 24)
    with pytest.raises(CloudFormatError, match="sidecar"):
        load_raw_f32(path)


def test_raw_f32_count_mismatch(tmp_path, raw_points):
    xyz, rgb = raw_points
    path = tmp_path / "x.bin"
    save_raw_f32(xyz, rgb, "x", path)
    sidecar = path.with_suffix(".bin.json")
    sidecar.write_text('{"id": "x", "count": 60}')
    with pytest.raises(CloudFormatError, match="expected"):
        load_raw_f32(path)


def test_not_a_ply(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_bytes(b"OFF\n3 1 0\n")
    with pytest.raises(CloudFormatError):
        load_ply(path)


def test_truncated_binary_ply(tmp_path, raw_points):
    xyz, rgb = raw_points
    path = tmp_path / "t.ply"
    save_ply(xyz, path, colors=rgb, binary=True)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(CloudFormatError, match="too short"):
        load_ply(path)


def test_cloud_store_discovers_both_formats(tmp_path, raw_points):
    xyz, rgb = raw_points
    save_ply(xyz, tmp_path / "alpha.ply", colors=rgb)
    save_raw_f32(xyz, rgb, "beta", tmp_path / "beta.bin")
    store = CloudStore(tmp_path)
    assert store.ids() == ["alpha", "beta"]
    assert "alpha" in store
    assert store.load("beta").cloud_id == "beta"
    with pytest.raises(CorpusError, match="not found"):
        store.load("gamma")
