"""Object meshes: primitives, OBJ I/O, exact distance queries, BPS and keypoints."""
from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import BadDims, EmptyMesh, NotWatertight, SamplingFailed

PRIMITIVE_KINDS = ("box", "cylinder", "lamp_composite", "table_composite")
N_AABB_KEYPOINTS = 8
N_POISSON_KEYPOINTS = 16


@dataclass(frozen=True, eq=False)
class ObjectMesh:
    vertices: np.ndarray
    faces: np.ndarray
    name: str = "mesh"

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("vertices must be (N, 3) and faces (M, 3)")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @cached_property
    def watertight(self) -> bool:
        """Every directed edge appears once and is matched by its reverse."""
        if len(self.faces) == 0:
            return False
        f = self.faces
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        if np.any(counts != 1):
            return False
        fwd = {tuple(e) for e in uniq.tolist()}
        return all((b, a) in fwd for a, b in fwd)

    def aabb(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def surface_area(self) -> float:
        t = self.triangles
        return float(0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1).sum())

    def volume(self) -> float:
        """Signed volume by the divergence theorem (positive for outward winding)."""
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def transformed(self, rotation=None, translation=None, scale: float = 1.0) -> "ObjectMesh":
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return ObjectMesh(v, self.faces, self.name)

    def geometry_hash(self) -> str:
        """Hash of the triangle soup, independent of vertex and face ordering."""
        return hashlib.sha256(_canonical_triangles(self).tobytes()).hexdigest()


def _canonical_triangles(mesh: ObjectMesh) -> np.ndarray:
    tris = np.round(mesh.triangles, 9) + 0.0  # +0.0 folds -0.0
    # sort vertices inside each triangle, then the triangles themselves
    order = np.lexsort((tris[:, :, 2], tris[:, :, 1], tris[:, :, 0]), axis=1)
    tris = np.take_along_axis(tris, order[:, :, None], axis=1)
    flat = tris.reshape(len(tris), 9)
    idx = np.lexsort(flat.T[::-1])
    return np.ascontiguousarray(flat[idx].reshape(-1, 3, 3))


# ---------------------------------------------------------------- primitives

def _box(w, h, d, x0=0.0, y0=0.0, z0=0.0):
    xs = (x0 - w / 2, x0 + w / 2)
    ys = (y0, y0 + h)
    zs = (z0 - d / 2, z0 + d / 2)
    v = np.array([[xs[i], ys[j], zs[k]] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    # vertex index = 4 i + 2 j + k
    f = np.array([
        [0, 1, 3], [0, 3, 2],  # x-
        [4, 6, 7], [4, 7, 5],  # x+
        [0, 4, 5], [0, 5, 1],  # y-
        [2, 3, 7], [2, 7, 6],  # y+
        [0, 2, 6], [0, 6, 4],  # z-
        [1, 5, 7], [1, 7, 3],  # z+
    ])
    return v, f


def _cylinder(r, h, segments, y0=0.0):
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([r * np.cos(ang), np.zeros(segments), -r * np.sin(ang)], axis=1)
    bottom = ring + [0, y0, 0]
    top = ring + [0, y0 + h, 0]
    v = np.concatenate([bottom, top, [[0, y0, 0], [0, y0 + h, 0]]])
    cb, ct = 2 * segments, 2 * segments + 1
    f = []
    for i in range(segments):
        j = (i + 1) % segments
        f.append([i, j, segments + j])
        f.append([i, segments + j, segments + i])
        f.append([cb, j, i])
        f.append([ct, segments + i, segments + j])
    return v, np.array(f)


def _merge(parts):
    verts, faces, off = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(f + off)
        off += len(v)
    return np.concatenate(verts), np.concatenate(faces)


def make_primitive(kind: str, dims, segments: int = 64) -> ObjectMesh:
    """Watertight toy object resting on y = 0, centered on the vertical axis.

    dims: box/table_composite (width, height, depth); cylinder (radius, height);
    lamp_composite (base_radius, pole_radius, height).
    """
    dims = tuple(float(x) for x in dims)
    if any(not np.isfinite(x) or x <= 0 for x in dims):
        raise BadDims(f"dims must be positive, got {dims}")
    if kind == "box":
        if len(dims) != 3:
            raise BadDims("box needs (width, height, depth)")
        v, f = _box(*dims)
    elif kind == "cylinder":
        if len(dims) != 2:
            raise BadDims("cylinder needs (radius, height)")
        v, f = _cylinder(dims[0], dims[1], segments)
    elif kind == "lamp_composite":
        if len(dims) != 3:
            raise BadDims("lamp_composite needs (base_radius, pole_radius, height)")
        base_r, pole_r, height = dims
        base_h, shade_h = 0.04, 0.25
        if pole_r >= base_r or height <= base_h + shade_h + 0.05:
            raise BadDims(f"inconsistent lamp dims {dims}")
        seg = max(8, segments // 2)
        v, f = _merge([
            _cylinder(base_r, base_h, seg),
            _cylinder(pole_r, height - base_h - shade_h, seg, y0=base_h),
            _cylinder(base_r, shade_h, seg, y0=height - shade_h),
        ])
    elif kind == "table_composite":
        if len(dims) != 3:
            raise BadDims("table_composite needs (width, height, depth)")
        w, h, d = dims
        top_t, leg, inset = 0.04, 0.05, 0.03
        if w <= 2 * (leg + inset) or d <= 2 * (leg + inset) or h <= top_t + 0.05:
            raise BadDims(f"inconsistent table dims {dims}")
        lx = w / 2 - inset - leg / 2
        lz = d / 2 - inset - leg / 2
        parts = [_box(w, top_t, d, y0=h - top_t)]
        for sx, sz in itertools.product((-1, 1), (-1, 1)):
            parts.append(_box(leg, h - top_t, leg, x0=sx * lx, z0=sz * lz))
        v, f = _merge(parts)
    else:
        raise BadDims(f"unknown primitive kind {kind!r}")
    return ObjectMesh(v, f, name=kind)


def make_sphere(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> ObjectMesh:
    """Icosphere, mostly for tests against the analytic sphere distance."""
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache, nf = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return ObjectMesh(np.array(verts) * radius + np.asarray(center), np.array(f), name="sphere")


# ---------------------------------------------------------------- OBJ I/O

def write_obj(mesh: ObjectMesh, path) -> Path:
    path = Path(path)
    lines = [f"# {mesh.name}"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_obj(path, name: str | None = None) -> ObjectMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    return ObjectMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3),
                      name=name or Path(path).stem)


# ---------------------------------------------------------------- distances

def _closest_points(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p; all broadcast to (..., 3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i->...", ab, ap)
    d2 = np.einsum("...i,...i->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i->...", ab, bp)
    d4 = np.einsum("...i,...i->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i->...", ab, cp)
    d6 = np.einsum("...i,...i->...", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        out = a + ab * v[..., None] + ac * w[..., None]

        e_bc = (d4 - d3) + (d5 - d6)
        t_bc = np.where(e_bc != 0, (d4 - d3) / e_bc, 0.0)
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        out = np.where(m[..., None], b + (c - b) * t_bc[..., None], out)

        t_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out = np.where(m[..., None], a + ac * t_ac[..., None], out)

        m = (d6 >= 0) & (d5 <= d6)
        out = np.where(m[..., None], c, out)

        t_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out = np.where(m[..., None], a + ab * t_ab[..., None], out)

        m = (d3 >= 0) & (d4 <= d3)
        out = np.where(m[..., None], b, out)

        m = (d1 <= 0) & (d2 <= 0)
        out = np.where(m[..., None], a, out)
    return out


def unsigned_distance(mesh: ObjectMesh, points, chunk: int = 2_000_000) -> np.ndarray:
    """Exact minimum point-to-triangle distance for each point."""
    if len(mesh.faces) == 0:
        raise EmptyMesh("mesh has no faces")
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    tri = mesh.triangles
    a, b, c = tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]
    step = max(1, chunk // len(tri))
    out = np.empty(len(pts))
    for s in range(0, len(pts), step):
        p = pts[s:s + step, None, :]
        q = _closest_points(p, a, b, c)
        out[s:s + step] = np.sqrt(np.min(np.sum((q - p) ** 2, axis=-1), axis=1))
    return out[0] if single else out


def winding_number(mesh: ObjectMesh, points, chunk: int = 2_000_000) -> np.ndarray:
    """Generalized winding number (solid-angle sum / 4 pi)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles
    step = max(1, chunk // max(1, len(tri)))
    out = np.empty(len(pts))
    for s in range(0, len(pts), step):
        p = pts[s:s + step, None, :]
        a, b, c = tri[None, :, 0] - p, tri[None, :, 1] - p, tri[None, :, 2] - p
        la, lb, lc = (np.linalg.norm(x, axis=-1) for x in (a, b, c))
        num = np.einsum("...i,...i->...", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("...i,...i->...", a, b) * lc
               + np.einsum("...i,...i->...", b, c) * la + np.einsum("...i,...i->...", c, a) * lb)
        out[s:s + step] = np.sum(2 * np.arctan2(num, den), axis=1) / (4 * np.pi)
    return out


def signed_distance(mesh: ObjectMesh, points):
    """Distance to the surface, negative inside (winding number > 1/2)."""
    if len(mesh.faces) == 0:
        raise EmptyMesh("mesh has no faces")
    if not mesh.watertight:
        raise NotWatertight(f"mesh {mesh.name!r} is not watertight")
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    d = np.atleast_1d(unsigned_distance(mesh, pts.reshape(-1, 3)))
    inside = winding_number(mesh, pts.reshape(-1, 3)) > 0.5
    d = np.where(inside, -d, d)
    return float(d[0]) if single else d


# ---------------------------------------------------------------- BPS

@dataclass(frozen=True, eq=False)
class BPSEncoding:
    basis: np.ndarray
    distances: np.ndarray


def sample_basis_points(n_points: int, radius: float, seed: int) -> np.ndarray:
    """Points uniform in a ball; deterministic for a given seed."""
    if n_points < 1 or radius <= 0:
        raise ValueError("need n_points >= 1 and radius > 0")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_points, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    r = radius * rng.random(n_points) ** (1.0 / 3.0)
    return x * r[:, None]


def bps_encode(mesh: ObjectMesh, basis) -> BPSEncoding:
    basis = np.asarray(basis, dtype=np.float64)
    return BPSEncoding(basis=basis, distances=np.atleast_1d(unsigned_distance(mesh, basis)))


def centered(mesh: ObjectMesh) -> ObjectMesh:
    lo, hi = mesh.aabb()
    return mesh.transformed(translation=-(lo + hi) / 2)


def half_diagonal(mesh: ObjectMesh) -> float:
    lo, hi = mesh.aabb()
    return float(np.linalg.norm(hi - lo) / 2)


# ---------------------------------------------------------------- keypoints

@dataclass(frozen=True, eq=False)
class KeypointSet:
    aabb_points: np.ndarray
    poisson_points: np.ndarray
    radius: float = field(default=0.0)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.aabb_points, self.poisson_points])


def aabb_corners(mesh: ObjectMesh) -> np.ndarray:
    lo, hi = mesh.aabb()
    return np.array([[(lo, hi)[i][0], (lo, hi)[j][1], (lo, hi)[k][2]]
                     for i in (0, 1) for j in (0, 1) for k in (0, 1)])


def sample_surface(tris: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on a triangle soup (n, 3)."""
    area = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    idx = rng.choice(len(tris), size=n, p=area / area.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tris[idx]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


def sample_keypoints(mesh: ObjectMesh, seed: int = 0, n_poisson: int = N_POISSON_KEYPOINTS,
                     darts: int = 4000, max_halvings: int = 4) -> KeypointSet:
    """8 AABB corners plus `n_poisson` Poisson-disk surface samples.

    Dart throwing starts at radius sqrt(area / (16 pi)) and halves the radius
    up to `max_halvings` times if fewer than `n_poisson` darts are accepted.
    The sampler runs on the canonically ordered triangle soup, seeded from the
    geometry hash, so vertex or face reordering gives the same points.
    """
    if len(mesh.faces) == 0:
        raise EmptyMesh("mesh has no faces")
    tris = _canonical_triangles(mesh)
    ghash = int(mesh.geometry_hash()[:16], 16)
    radius = float(np.sqrt(mesh.surface_area() / (n_poisson * np.pi)))
    for attempt in range(max_halvings + 1):
        rng = np.random.default_rng([seed, ghash, attempt])
        cand = sample_surface(tris, darts, rng)
        kept = []
        for p in cand:
            if all(np.sum((p - q) ** 2) >= radius ** 2 for q in kept):
                kept.append(p)
                if len(kept) == n_poisson:
                    return KeypointSet(aabb_corners(mesh), np.array(kept), radius)
        radius /= 2
    raise SamplingFailed(f"could not place {n_poisson} Poisson-disk points on {mesh.name!r}")
