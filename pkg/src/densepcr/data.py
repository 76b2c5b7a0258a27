"""Procedural meshes, a software renderer, ground-truth ladders and the on-disk dataset.

Dataset layout::

    ROOT/manifest.json
    ROOT/<sample id>/view_00.ppm ... view_NN.ppm
    ROOT/<sample id>/gt_sparse.pcb, gt_mid.pcb, gt_dense.pcb

``.pcb`` files hold an 8-byte header (``b"PCB1"`` + uint32 point count, little
endian) followed by little-endian float32 xyz triples.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .pointset import farthest_point_sample, normalize_unit_bbox, sample_mesh_surface, triangle_areas

log = logging.getLogger(__name__)

KINDS = ("box", "cylinder", "ellipsoid", "torus", "l_bracket", "table")
ELEVATION_DEG = 20.0
VIEW_HALF_WIDTH = 0.9
BACKGROUND = 1.0
BASE_COLOR = np.array([0.55, 0.62, 0.78])
PCB_MAGIC = b"PCB1"
MANIFEST_VERSION = 1
TRAIN_FRACTION = 0.8


class DatasetError(RuntimeError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # [v x 3]
    triangles: np.ndarray  # [t x 3] vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.intp)
        if self.triangles.size == 0:
            raise ValueError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if not triangle_areas(self.vertices, self.triangles).max() > 0:
            raise ValueError("mesh has no triangle with positive area")

    def transformed(self, scale: float, offset: np.ndarray) -> "TriangleMesh":
        return TriangleMesh((self.vertices - offset) * scale, self.triangles.copy())

    @staticmethod
    def merge(parts: list["TriangleMesh"]) -> "TriangleMesh":
        verts, tris, base = [], [], 0
        for p in parts:
            verts.append(p.vertices)
            tris.append(p.triangles + base)
            base += len(p.vertices)
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


@dataclass
class DatasetSample:
    image: np.ndarray  # [3 x H x W] in [0, 1]
    gt_sparse: np.ndarray
    gt_mid: np.ndarray
    gt_dense: np.ndarray
    category: str
    azimuth: float
    sample_id: str = ""
    view: int = 0


# ---------------------------------------------------------------- shapes

def _box(sx, sy, sz, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    c = np.asarray(center, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    v = corners * np.array([sx, sy, sz]) / 2.0 + c
    # vertex index = 4*ix + 2*iy + iz
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, cc, d in quads:
        tris += [(a, b, cc), (a, cc, d)]
    return TriangleMesh(v, np.array(tris))


def _cylinder(radius, height, segments) -> TriangleMesh:
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), np.zeros(segments), radius * np.sin(ang)], axis=1)
    bottom = ring + [0, -height / 2, 0]
    top = ring + [0, height / 2, 0]
    v = np.concatenate([bottom, top, [[0, -height / 2, 0], [0, height / 2, 0]]])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [(i, segments + i, segments + j), (i, segments + j, j)]
        tris += [(cb, i, j), (ct, segments + j, segments + i)]
    return TriangleMesh(v, np.array(tris))


def _ellipsoid(a, b, c, n_lon, n_lat) -> TriangleMesh:
    verts = [[0.0, b, 0.0]]
    for i in range(1, n_lat):
        theta = np.pi * i / n_lat
        for j in range(n_lon):
            phi = 2 * np.pi * j / n_lon
            verts.append([a * np.sin(theta) * np.cos(phi), b * np.cos(theta), c * np.sin(theta) * np.sin(phi)])
    verts.append([0.0, -b, 0.0])
    south = len(verts) - 1

    def idx(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    tris = []
    for j in range(n_lon):
        tris.append((0, idx(1, j + 1), idx(1, j)))
        tris.append((south, idx(n_lat - 1, j), idx(n_lat - 1, j + 1)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a0, a1, b0, b1 = idx(i, j), idx(i, j + 1), idx(i + 1, j), idx(i + 1, j + 1)
            tris += [(a0, a1, b1), (a0, b1, b0)]
    return TriangleMesh(np.array(verts), np.array(tris))


def _torus(major, minor, n_major, n_minor) -> TriangleMesh:
    u = 2 * np.pi * np.arange(n_major) / n_major
    w = 2 * np.pi * np.arange(n_minor) / n_minor
    uu, ww = np.meshgrid(u, w, indexing="ij")
    r = major + minor * np.cos(ww)
    v = np.stack([r * np.cos(uu), minor * np.sin(ww), r * np.sin(uu)], axis=-1).reshape(-1, 3)
    tris = []
    for i in range(n_major):
        for j in range(n_minor):
            a0 = i * n_minor + j
            a1 = i * n_minor + (j + 1) % n_minor
            b0 = ((i + 1) % n_major) * n_minor + j
            b1 = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            tris += [(a0, b0, b1), (a0, b1, a1)]
    return TriangleMesh(v, np.array(tris))


def _l_bracket(width, height, thickness, depth) -> TriangleMesh:
    # L-shaped polygon in the x-y plane, extruded along z
    poly = np.array([[0, 0], [width, 0], [width, thickness], [thickness, thickness],
                     [thickness, height], [0, height]], dtype=np.float64)
    poly -= [width / 2, height / 2]
    k = len(poly)
    front = np.column_stack([poly, np.full(k, depth / 2)])
    back = np.column_stack([poly, np.full(k, -depth / 2)])
    v = np.concatenate([front, back])
    cap = [(0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 4, 5)]
    tris = [t for t in cap] + [(k + a, k + c, k + b) for a, b, c in cap]
    for i in range(k):
        j = (i + 1) % k
        tris += [(i, k + i, k + j), (i, k + j, j)]
    return TriangleMesh(v, np.array(tris))


def _table(width, depth, height, top_thickness, leg) -> TriangleMesh:
    parts = [_box(width, top_thickness, depth, (0, height / 2 - top_thickness / 2, 0))]
    leg_h = height - top_thickness
    for sx in (-1, 1):
        for sz in (-1, 1):
            c = (sx * (width / 2 - leg / 2), -height / 2 + leg_h / 2, sz * (depth / 2 - leg / 2))
            parts.append(_box(leg, leg_h, leg, c))
    return TriangleMesh.merge(parts)


_DEFAULTS = {
    "box": dict(sx=1.0, sy=1.0, sz=1.0),
    "cylinder": dict(radius=0.5, height=1.0, segments=32),
    "ellipsoid": dict(a=0.5, b=0.5, c=0.5, n_lon=32, n_lat=16),
    "torus": dict(major=0.6, minor=0.2, n_major=32, n_minor=12),
    "l_bracket": dict(width=1.0, height=1.0, thickness=0.3, depth=0.5),
    "table": dict(width=1.0, depth=0.7, height=0.7, top_thickness=0.08, leg=0.08),
}


def _random_params(kind: str, rng: np.random.Generator) -> dict:
    u = rng.uniform
    if kind == "box":
        return dict(sx=u(0.4, 1.2), sy=u(0.4, 1.2), sz=u(0.4, 1.2))
    if kind == "cylinder":
        return dict(radius=u(0.2, 0.5), height=u(0.5, 1.3))
    if kind == "ellipsoid":
        return dict(a=u(0.3, 0.7), b=u(0.3, 0.7), c=u(0.3, 0.7))
    if kind == "torus":
        major = u(0.4, 0.7)
        return dict(major=major, minor=u(0.1, 0.45) * major)
    if kind == "l_bracket":
        return dict(width=u(0.6, 1.2), height=u(0.6, 1.2), thickness=u(0.15, 0.35), depth=u(0.3, 0.8))
    return dict(width=u(0.8, 1.2), depth=u(0.5, 0.9), height=u(0.5, 0.9))


def generate_shape(kind: str, params: Optional[dict] = None, seed=0) -> TriangleMesh:
    """Closed parametric mesh of the given kind.

    Explicit ``params`` override the kind's defaults; when ``params`` is None the
    dimensions are drawn from ``seed``.
    """
    if kind not in _DEFAULTS:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {KINDS}")
    p = dict(_DEFAULTS[kind])
    p.update(_random_params(kind, np.random.default_rng(seed)) if params is None else params)
    for name, val in p.items():
        if not val > 0:
            raise ValueError(f"{kind}: parameter {name} must be positive, got {val}")
    if kind == "box":
        return _box(p["sx"], p["sy"], p["sz"])
    if kind == "cylinder":
        return _cylinder(p["radius"], p["height"], int(p["segments"]))
    if kind == "ellipsoid":
        return _ellipsoid(p["a"], p["b"], p["c"], int(p["n_lon"]), int(p["n_lat"]))
    if kind == "torus":
        if p["minor"] >= p["major"]:
            raise ValueError("torus: minor radius must be smaller than major radius")
        return _torus(p["major"], p["minor"], int(p["n_major"]), int(p["n_minor"]))
    if kind == "l_bracket":
        if p["thickness"] >= min(p["width"], p["height"]):
            raise ValueError("l_bracket: thickness must be below width and height")
        return _l_bracket(p["width"], p["height"], p["thickness"], p["depth"])
    if 2 * p["leg"] >= min(p["width"], p["depth"]) or p["top_thickness"] >= p["height"]:
        raise ValueError("table: legs or top too thick for the footprint")
    return _table(p["width"], p["depth"], p["height"], p["top_thickness"], p["leg"])


# ---------------------------------------------------------------- rendering

def view_azimuths(count: int) -> np.ndarray:
    return 360.0 * np.arange(count) / count


def camera_basis(azimuth_deg: float, elevation_deg: float = ELEVATION_DEG):
    """(right, up, toward-camera) unit vectors for an orthographic camera circling the y axis."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    back = np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
    right = np.cross([0.0, 1.0, 0.0], back)
    right /= np.linalg.norm(right)
    up = np.cross(back, right)
    return right, up, back


def render_view(mesh: TriangleMesh, azimuth_deg: float, image_size: int,
                elevation_deg: float = ELEVATION_DEG) -> np.ndarray:
    """Flat-shaded orthographic z-buffer render, [3 x H x W] on a white background."""
    right, up, back = camera_basis(azimuth_deg, elevation_deg)
    v = mesh.vertices
    proj = np.stack([v @ right, v @ up, v @ back], axis=1)
    tri = proj[mesh.triangles]  # t x 3 x 3
    world = v[mesh.triangles]
    normals = np.cross(world[:, 1] - world[:, 0], world[:, 2] - world[:, 0])
    norm = np.linalg.norm(normals, axis=1)
    keep = norm > 0
    tri, normals = tri[keep], normals[keep] / norm[keep, None]
    normals *= np.where(normals @ back < 0, -1.0, 1.0)[:, None]
    light = 0.8 * back + 0.5 * up - 0.3 * right
    light /= np.linalg.norm(light)
    shade = 0.25 + 0.75 * np.clip(normals @ light, 0.0, 1.0)

    s = image_size
    pix = (np.arange(s) + 0.5) / s * 2 * VIEW_HALF_WIDTH - VIEW_HALF_WIDTH
    px, py = np.meshgrid(pix, -pix)  # row 0 is the top of the image
    px, py = px.reshape(-1), py.reshape(-1)

    depth = np.full(s * s, -np.inf)
    owner = np.full(s * s, -1)
    x0, y0 = tri[:, 0, 0], tri[:, 0, 1]
    e1x, e1y = tri[:, 1, 0] - x0, tri[:, 1, 1] - y0
    e2x, e2y = tri[:, 2, 0] - x0, tri[:, 2, 1] - y0
    det = e1x * e2y - e2x * e1y
    ok = np.abs(det) > 1e-15
    chunk = max(1, (1 << 21) // max(1, s * s))
    valid = np.flatnonzero(ok)
    for start in range(0, len(valid), chunk):
        sel = valid[start:start + chunk]
        dx = px[:, None] - x0[sel]
        dy = py[:, None] - y0[sel]
        l1 = (dx * e2y[sel] - e2x[sel] * dy) / det[sel]
        l2 = (e1x[sel] * dy - dx * e1y[sel]) / det[sel]
        l0 = 1.0 - l1 - l2
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        z = l0 * tri[sel, 0, 2] + l1 * tri[sel, 1, 2] + l2 * tri[sel, 2, 2]
        z = np.where(inside, z, -np.inf)
        best = np.argmax(z, axis=1)
        zb = z[np.arange(len(z)), best]
        better = zb > depth
        depth[better] = zb[better]
        owner[better] = sel[best[better]]

    img = np.full((3, s * s), BACKGROUND)
    hit = owner >= 0
    img[:, hit] = np.clip(BASE_COLOR[:, None] * shade[owner[hit]][None, :], 0.0, 1.0)
    return img.reshape(3, s, s)


def render_views(mesh: TriangleMesh, count: int = 24, image_size: int = 32,
                 elevation_deg: float = ELEVATION_DEG) -> list[np.ndarray]:
    if count < 1:
        raise ValueError(f"view count must be >= 1, got {count}")
    return [render_view(mesh, az, image_size, elevation_deg) for az in view_azimuths(count)]


# ---------------------------------------------------------------- ground truth

def build_gt_ladder(mesh: TriangleMesh, n: int, seed=0, oversample: int = 4):
    """Nested FPS clouds of n, 4n and 16n points, normalized by one shared transform.

    All three come from one pool of ``oversample * 16n`` area-uniform samples;
    the sparse and mid clouds are prefixes of the FPS order of the dense one.
    Returns ``(sparse, mid, dense, (scale, offset))``.
    """
    if n < 4:
        raise ValueError(f"base resolution must be >= 4, got {n}")
    pool = sample_mesh_surface(mesh, 16 * n * oversample, seed=seed, oversample=1)
    order = farthest_point_sample(pool, 16 * n)
    dense = pool[order]
    dense_n, scale, offset = normalize_unit_bbox(dense)
    dense_n = dense_n.astype(np.float32).astype(np.float64)
    return dense_n[:n].copy(), dense_n[:4 * n].copy(), dense_n, (scale, offset)


# ---------------------------------------------------------------- file formats

def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pcb_bytes(points: np.ndarray) -> bytes:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    return PCB_MAGIC + struct.pack("<I", len(pts)) + pts.tobytes()


def write_pcb(path, points: np.ndarray) -> None:
    _atomic_write(Path(path), pcb_bytes(points))


def read_pcb(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != PCB_MAGIC:
        raise DatasetError(f"{path}: not a PCB point cloud file")
    (count,) = struct.unpack("<I", raw[4:8])
    if len(raw) != 8 + 12 * count:
        raise DatasetError(f"{path}: expected {count} points, file size is {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(count, 3).astype(np.float64)


def quantize_image(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def ppm_bytes(img: np.ndarray) -> bytes:
    c, h, w = img.shape
    if c != 3:
        raise ValueError(f"PPM needs 3 channels, got {c}")
    px = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode() + px.tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    _atomic_write(Path(path), ppm_bytes(img))


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise DatasetError(f"{path}: truncated PPM header")
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6" or fields[3] != b"255":
        raise DatasetError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(fields[1]), int(fields[2])
    body = raw[pos + 1:]
    if len(body) != 3 * w * h:
        raise DatasetError(f"{path}: expected {3 * w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1) / 255.0


def ply_text(points: np.ndarray) -> str:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    head = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
            "property float x", "property float y", "property float z", "end_header"]
    body = [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in pts]
    return "\n".join(head + body) + "\n"


def write_ply(path, points: np.ndarray) -> None:
    _atomic_write(Path(path), ply_text(points).encode())


def read_ply(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply" or "format ascii 1.0" not in lines[1]:
        raise DatasetError(f"{path}: not an ASCII PLY file")
    end = lines.index("end_header")
    count = next(int(l.split()[2]) for l in lines[:end] if l.startswith("element vertex"))
    rows = [l.split()[:3] for l in lines[end + 1:end + 1 + count]]
    if len(rows) != count:
        raise DatasetError(f"{path}: header declares {count} vertices, found {len(rows)}")
    return np.array(rows, dtype=np.float64).reshape(count, 3)


# ---------------------------------------------------------------- manifest

def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def id_hash(sample_id: str) -> str:
    return hashlib.sha256(sample_id.encode()).hexdigest()


def assign_splits(ids: list[str], train_fraction: float = TRAIN_FRACTION) -> dict[str, str]:
    """Rank ids by hash; the first ``round(fraction * K)`` are train, the rest test."""
    ranked = sorted(ids, key=id_hash)
    n_train = int(round(train_fraction * len(ids)))
    return {sid: ("train" if i < n_train else "test") for i, sid in enumerate(ranked)}


@dataclass
class DatasetManifest:
    root: Path
    meta: dict
    samples: list[dict]

    def ids(self, split: Optional[str] = None) -> list[str]:
        return [s["id"] for s in self.samples if split in (None, "all") or s["split"] == split]

    def entry(self, sample_id: str) -> dict:
        for s in self.samples:
            if s["id"] == sample_id:
                return s
        raise KeyError(f"no sample {sample_id!r} in manifest")

    def to_json(self) -> dict:
        return {**self.meta, "samples": self.samples}


def write_manifest(root, meta: dict, samples: list[dict]) -> Path:
    path = Path(root) / "manifest.json"
    payload = {**meta, "samples": samples}
    _atomic_write(path, (json.dumps(payload, indent=1, sort_keys=True) + "\n").encode())
    return path


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"missing manifest: {path}")
    payload = json.loads(path.read_text())
    if payload.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{path}: unsupported manifest version {payload.get('version')}")
    samples = payload.pop("samples")
    return DatasetManifest(root, payload, samples)


def _checked(manifest: DatasetManifest, ref: dict) -> Path:
    path = manifest.root / ref["path"]
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    if _sha256(path) != ref["sha256"]:
        raise DatasetError(f"checksum mismatch: {path}")
    return path


def load_gt(manifest: DatasetManifest, sample_id: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    gt = manifest.entry(sample_id)["gt"]
    return tuple(read_pcb(_checked(manifest, gt[k])) for k in ("sparse", "mid", "dense"))


def load_image(manifest: DatasetManifest, sample_id: str, view: int) -> np.ndarray:
    ref = manifest.entry(sample_id)["views"][view]
    return read_ppm(_checked(manifest, ref))


def load_sample(manifest: DatasetManifest, sample_id: str, view: int = 0) -> DatasetSample:
    entry = manifest.entry(sample_id)
    sparse, mid, dense = load_gt(manifest, sample_id)
    return DatasetSample(load_image(manifest, sample_id, view), sparse, mid, dense,
                         entry["category"], float(entry["views"][view]["azimuth"]), sample_id, view)


@dataclass
class ShapeRecord:
    """Every view of one shape plus its ground truth, held in memory."""

    sample_id: str
    category: str
    images: np.ndarray  # [V x 3 x H x W]
    azimuths: np.ndarray
    gt: tuple  # (sparse, mid, dense)

    def sample(self, view: int) -> DatasetSample:
        return DatasetSample(self.images[view], *self.gt, self.category, float(self.azimuths[view]),
                             self.sample_id, view)


def load_split(manifest: DatasetManifest, split: str = "train") -> list[ShapeRecord]:
    ids = manifest.ids(split)
    if not ids:
        raise DatasetError(f"split {split!r} is empty")
    out = []
    for sid in ids:
        entry = manifest.entry(sid)
        images = np.stack([load_image(manifest, sid, v) for v in range(len(entry["views"]))])
        az = np.array([float(v["azimuth"]) for v in entry["views"]])
        out.append(ShapeRecord(sid, entry["category"], images, az, load_gt(manifest, sid)))
    return out


def make_record(sample_id: str, kind: str, mesh: TriangleMesh, base_n: int, views: int,
                image_size: int, seed) -> ShapeRecord:
    sparse, mid, dense, (scale, offset) = build_gt_ladder(mesh, base_n, seed=seed)
    normed = mesh.transformed(scale, offset)
    images = np.stack([quantize_image(im) for im in render_views(normed, views, image_size)])
    return ShapeRecord(sample_id, kind, images, view_azimuths(views), (sparse, mid, dense))


def generate_dataset(out, num_shapes: int, base_n: int = 256, views: int = 24,
                     image_size: int = 32, seed: int = 0) -> DatasetManifest:
    """Write a complete synthetic dataset; identical arguments give identical bytes."""
    if num_shapes < 1:
        raise ValueError("num_shapes must be >= 1")
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(num_shapes)
    ids = [f"shape_{i:04d}" for i in range(num_shapes)]
    splits = assign_splits(ids)
    samples = []
    for i, sid in enumerate(ids):
        kind = KINDS[i % len(KINDS)]
        shape_seed = int(seeds[i].generate_state(1)[0])
        mesh = generate_shape(kind, seed=shape_seed)
        rec = make_record(sid, kind, mesh, base_n, views, image_size, shape_seed)
        view_refs = []
        for v, (img, az) in enumerate(zip(rec.images, rec.azimuths)):
            rel = f"{sid}/view_{v:02d}.ppm"
            write_ppm(root / rel, img)
            view_refs.append({"path": rel, "azimuth": float(az), "sha256": _sha256(root / rel)})
        gt_refs = {}
        for name, cloud in zip(("sparse", "mid", "dense"), rec.gt):
            rel = f"{sid}/gt_{name}.pcb"
            write_pcb(root / rel, cloud)
            gt_refs[name] = {"path": rel, "points": len(cloud), "sha256": _sha256(root / rel)}
        samples.append({"id": sid, "category": kind, "split": splits[sid], "seed": shape_seed,
                        "views": view_refs, "gt": gt_refs})
        log.info("generated %s (%s, %s)", sid, kind, splits[sid])
    meta = {"version": MANIFEST_VERSION, "base_n": base_n, "image_size": image_size,
            "views": views, "seed": seed, "elevation_deg": ELEVATION_DEG}
    write_manifest(root, meta, samples)
    return load_manifest(root)
