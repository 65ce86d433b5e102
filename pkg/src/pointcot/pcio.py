"""Point-cloud file formats and the on-disk cloud store.

Supported inputs:

- PLY, ``ascii 1.0`` or ``binary_little_endian 1.0``, with vertex properties
  x, y, z and optional red, green, blue (8-bit, mapped to [0, 1]).
- Raw little-endian float32 stream of N x 6 values (x, y, z, r, g, b) with a
  JSON sidecar ``<file>.json`` carrying ``{"id": ..., "count": N}``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .corpus import CorpusError, PointCloud, normalize_cloud


class CloudFormatError(CorpusError):
    """Malformed point-cloud file."""


_PLY_FLOAT_TYPES = {"float", "float32", "double", "float64"}
_PLY_UCHAR_TYPES = {"uchar", "uint8"}

_STRUCT_CODES = {
    "float": "f",
    "float32": "f",
    "double": "d",
    "float64": "d",
    "uchar": "B",
    "uint8": "B",
    "char": "b",
    "int8": "b",
    "short": "h",
    "int16": "h",
    "ushort": "H",
    "uint16": "H",
    "int": "i",
    "int32": "i",
    "uint": "I",
    "uint32": "I",
}


@dataclass
class _PlyHeader:
    fmt: str  # "ascii" | "binary_little_endian"
    vertex_count: int
    properties: list  # [(type, name), ...] for the vertex element
    data_offset: int


def _parse_ply_header(data: bytes, path: Path) -> _PlyHeader:
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise CloudFormatError(f"{path}: not a PLY file")
    header_text = data[:end].decode("ascii", errors="replace")
    fmt = None
    vertex_count = None
    properties: list = []
    current_element = None
    for line in header_text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] not in ("ascii", "binary_little_endian"):
                raise CloudFormatError(f"{path}: unsupported PLY format {parts[1]!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            current_element = parts[1]
            if current_element == "vertex":
                vertex_count = int(parts[2])
        elif parts[0] == "property" and current_element == "vertex":
            if parts[1] == "list":
                raise CloudFormatError(f"{path}: list properties not supported on vertices")
            properties.append((parts[1], parts[2]))
    if fmt is None or vertex_count is None:
        raise CloudFormatError(f"{path}: incomplete PLY header")
    names = [name for _, name in properties]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise CloudFormatError(f"{path}: vertex property {axis!r} missing")
    return _PlyHeader(fmt=fmt, vertex_count=vertex_count, properties=properties,
                      data_offset=end + len(b"end_header\n"))


def load_ply(path: Union[str, Path], cloud_id: Optional[str] = None) -> PointCloud:
    """Load a PLY file and return the normalized cloud."""
    path = Path(path)
    data = path.read_bytes()
    header = _parse_ply_header(data, path)
    names = [name for _, name in header.properties]
    types = {name: typ for typ, name in header.properties}
    has_color = all(c in names for c in ("red", "green", "blue"))
    if has_color and not all(types[c] in _PLY_UCHAR_TYPES for c in ("red", "green", "blue")):
        raise CloudFormatError(f"{path}: color properties must be 8-bit")
    for axis in ("x", "y", "z"):
        if types[axis] not in _PLY_FLOAT_TYPES:
            raise CloudFormatError(f"{path}: coordinate property {axis!r} must be float")

    if header.fmt == "ascii":
        text = data[header.data_offset:].decode("ascii", errors="replace")
        rows = []
        for line in text.splitlines():
            if line.strip():
                rows.append(line.split())
            if len(rows) == header.vertex_count:
                break
        if len(rows) < header.vertex_count:
            raise CloudFormatError(f"{path}: expected {header.vertex_count} vertices, "
                                   f"found {len(rows)}")
        try:
            columns = {name: [row[i] for row in rows] for i, name in enumerate(names)}
        except IndexError as exc:
            raise CloudFormatError(f"{path}: short vertex row") from exc
        xyz = np.column_stack([np.asarray(columns[a], dtype=np.float64) for a in "xyz"])
        rgb = None
        if has_color:
            rgb = np.column_stack(
                [np.asarray(columns[c], dtype=np.float64) for c in ("red", "green", "blue")]
            ) / 255.0
    else:
        codes = "".join(_STRUCT_CODES[typ] for typ, _ in header.properties)
        row = struct.Struct("<" + codes)
        body = data[header.data_offset:]
        needed = row.size * header.vertex_count
        if len(body) < needed:
            raise CloudFormatError(f"{path}: binary body too short "
                                   f"({len(body)} < {needed} bytes)")
        values = list(row.iter_unpack(body[:needed]))
        index = {name: i for i, name in enumerate(names)}
        xyz = np.array(
            [[v[index["x"]], v[index["y"]], v[index["z"]]] for v in values], dtype=np.float64
        )
        rgb = None
        if has_color:
            rgb = np.array(
                [[v[index["red"]], v[index["green"]], v[index["blue"]]] for v in values],
                dtype=np.float64,
            ) / 255.0
    return normalize_cloud(xyz, cloud_id or path.stem, colors=rgb)


def save_ply(
    cloud_xyz: np.ndarray,
    path: Union[str, Path],
    colors: Optional[np.ndarray] = None,
    binary: bool = False,
) -> None:
    """Write raw (unnormalized) points to PLY; used for fixtures and exports."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xyz = np.asarray(cloud_xyz, dtype=np.float64)
    n = xyz.shape[0]
    lines = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    rgb8 = None
    if colors is not None:
        rgb8 = np.clip(np.round(np.asarray(colors, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(header)
        if binary:
            for i in range(n):
                fh.write(struct.pack("<fff", *xyz[i]))
                if rgb8 is not None:
                    fh.write(struct.pack("<BBB", *rgb8[i]))
        else:
            for i in range(n):
                row = f"{xyz[i, 0]:.9g} {xyz[i, 1]:.9g} {xyz[i, 2]:.9g}"
                if rgb8 is not None:
                    row += f" {rgb8[i, 0]} {rgb8[i, 1]} {rgb8[i, 2]}"
                fh.write((row + "\n").encode("ascii"))


def load_raw_f32(path: Union[str, Path]) -> PointCloud:
    """Load a raw float32 N x 6 stream with its JSON sidecar."""
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise CloudFormatError(f"{path}: missing sidecar {sidecar.name}")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    cloud_id = meta.get("id")
    count = meta.get("count")
    if not isinstance(cloud_id, str) or not isinstance(count, int):
        raise CloudFormatError(f"{sidecar}: sidecar must carry string 'id' and int 'count'")
    data = np.fromfile(path, dtype="<f4")
    if data.size != count * 6:
        raise CloudFormatError(
            f"{path}: expected {count * 6} float32 values, found {data.size}"
        )
    data = data.reshape(count, 6).astype(np.float64)
    return normalize_cloud(data[:, :3], cloud_id, colors=data[:, 3:6])


def save_raw_f32(
    cloud_xyz: np.ndarray,
    colors: np.ndarray,
    cloud_id: str,
    path: Union[str, Path],
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xyz = np.asarray(cloud_xyz, dtype=np.float32)
    rgb = np.asarray(colors, dtype=np.float32)
    stream = np.hstack([xyz, rgb]).astype("<f4")
    stream.tofile(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(
        json.dumps({"id": cloud_id, "count": int(xyz.shape[0])}) + "\n", encoding="utf-8"
    )


class CloudStore:
    """Directory of point-cloud files keyed by cloud id.

    Files are discovered once at construction; clouds load (and normalize)
    lazily and are cached. Instances are read-only after construction, so
    they are safe to share across worker threads.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self._files: dict[str, Path] = {}
        self._cache: dict[str, PointCloud] = {}
        if self.root.exists():
            for p in sorted(self.root.iterdir()):
                if p.suffix == ".ply":
                    self._files[p.stem] = p
                elif p.suffix == ".bin" and p.with_suffix(".bin.json").exists():
                    meta = json.loads(p.with_suffix(".bin.json").read_text(encoding="utf-8"))
                    self._files[str(meta.get("id", p.stem))] = p

    def ids(self) -> list:
        return sorted(self._files)

    def __contains__(self, cloud_id: str) -> bool:
        return cloud_id in self._files

    def load(self, cloud_id: str) -> PointCloud:
        if cloud_id in self._cache:
            return self._cache[cloud_id]
        if cloud_id not in self._files:
            raise CorpusError(f"cloud {cloud_id!r} not found under {self.root}")
        path = self._files[cloud_id]
        cloud = load_ply(path, cloud_id) if path.suffix == ".ply" else load_raw_f32(path)
        self._cache[cloud_id] = cloud
        return cloud
