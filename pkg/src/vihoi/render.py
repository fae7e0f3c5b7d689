"""Keyframe selection, a small software rasterizer and the text-to-image client."""
from __future__ import annotations

import base64
import hashlib
import os
import re
from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import BackendUnavailable, BadCamera, BadResponseCount
from .motion import MotionSequence, Skeleton, forward_kinematics, rot6d_to_matrix
from .priors import array_to_png, png_to_array

BACKGROUND = np.array([0.92, 0.92, 0.9])
BODY_COLOR = np.array([0.25, 0.42, 0.85])
LEFT_COLOR = np.array([0.2, 0.65, 0.45])
OBJECT_COLOR = np.array([0.9, 0.55, 0.2])
LIGHT = np.array([0.3, 0.8, 0.5]) / np.linalg.norm([0.3, 0.8, 0.5])
LEFT_JOINTS = {1, 4, 7, 10, 13, 16, 18, 20}


@dataclass(frozen=True)
class KeyframeTriple:
    indices: tuple

    def __post_init__(self):
        a, b, c = self.indices
        if not 0 <= a <= b <= c:
            raise ValueError(f"keyframes must be ordered, got {self.indices}")


def select_keyframes(contact) -> KeyframeTriple:
    """Endpoints and midpoint of the longest contiguous run of either-hand contact."""
    mask = np.asarray(contact, dtype=bool)
    if mask.ndim == 2:
        mask = mask.any(axis=1)
    L = len(mask)
    if L < 3:
        raise ValueError("need at least 3 frames")
    best, start = (0, -1, -1), None
    for i, v in enumerate(np.append(mask, False)):
        if v and start is None:
            start = i
        elif not v and start is not None:
            if i - start > best[0]:
                best = (i - start, start, i - 1)
            start = None
    if best[0] == 0:
        return KeyframeTriple((0, L // 2, L - 1))
    _, s, e = best
    return KeyframeTriple((s, (s + e) // 2, e))


# ---------------------------------------------------------------- camera

@dataclass(frozen=True)
class Camera:
    eye: tuple = (4.0, 1.9, 2.2)
    look_at: tuple = (0.0, 0.75, 0.6)
    up: tuple = (0.0, 1.0, 0.0)
    ortho_scale: float = 2.3 / 224
    resolution: tuple = (224, 224)

    def basis(self):
        eye = np.asarray(self.eye, dtype=np.float64)
        f = np.asarray(self.look_at, dtype=np.float64) - eye
        if np.linalg.norm(f) < 1e-9:
            raise BadCamera("eye and look_at coincide")
        f = f / np.linalg.norm(f)
        r = np.cross(f, np.asarray(self.up, dtype=np.float64))
        if np.linalg.norm(r) < 1e-6:
            raise BadCamera("up vector is parallel to the view direction")
        r = r / np.linalg.norm(r)
        return eye, f, r, np.cross(r, f)

    def validate(self):
        H, W = self.resolution
        if H < 1 or W < 1 or not self.ortho_scale > 0:
            raise BadCamera("resolution and ortho_scale must be positive")
        self.basis()

    def project(self, pts):
        """(..., 3) world -> (..., 2) pixel (x, y) and (...,) depth."""
        eye, f, r, u = self.basis()
        H, W = self.resolution
        d = np.asarray(pts, dtype=np.float64) - eye
        px = W / 2 + d @ r / self.ortho_scale
        py = H / 2 - d @ u / self.ortho_scale
        return np.stack([px, py], axis=-1), d @ f


def _raster_triangles(img, zbuf, cam: Camera, tris, color):
    _, f, _, _ = cam.basis()
    H, W = cam.resolution
    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    nn = np.linalg.norm(n, axis=1)
    keep = nn > 1e-12
    tris, n = tris[keep], n[keep] / nn[keep, None]
    shade = 0.35 + 0.65 * np.abs(n @ LIGHT)
    xy, depth = cam.project(tris)
    for k in range(len(tris)):
        p, z = xy[k], depth[k]
        x0, x1 = int(max(0, np.floor(p[:, 0].min()))), int(min(W - 1, np.ceil(p[:, 0].max())))
        y0, y1 = int(max(0, np.floor(p[:, 1].min()))), int(min(H - 1, np.ceil(p[:, 1].max())))
        if x0 > x1 or y0 > y1:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
        (ax, ay), (bx, by), (cx, cy) = p
        den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        if abs(den) < 1e-12:
            continue
        w0 = ((by - cy) * (gx - cx) + (cx - bx) * (gy - cy)) / den
        w1 = ((cy - ay) * (gx - cx) + (ax - cx) * (gy - cy)) / den
        w2 = 1 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        zz = w0 * z[0] + w1 * z[1] + w2 * z[2]
        sub = zbuf[y0:y1 + 1, x0:x1 + 1]
        hit = inside & (zz < sub)
        sub[hit] = zz[hit]
        img[y0:y1 + 1, x0:x1 + 1][hit] = color * shade[k]


def _raster_capsule(img, zbuf, cam: Camera, a, b, radius, color):
    H, W = cam.resolution
    (pa, pb), (za, zb) = cam.project(np.stack([a, b]))
    r = radius / cam.ortho_scale
    lo = np.floor(np.minimum(pa, pb) - r).astype(int)
    hi = np.ceil(np.maximum(pa, pb) + r).astype(int)
    x0, y0 = max(lo[0], 0), max(lo[1], 0)
    x1, y1 = min(hi[0], W - 1), min(hi[1], H - 1)
    if x0 > x1 or y0 > y1:
        return
    gx, gy = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
    seg = pb - pa
    ll = seg @ seg
    s = np.zeros_like(gx) if ll < 1e-12 else np.clip(((gx - pa[0]) * seg[0] + (gy - pa[1]) * seg[1]) / ll, 0, 1)
    dx, dy = gx - (pa[0] + s * seg[0]), gy - (pa[1] + s * seg[1])
    d2 = (dx * dx + dy * dy) / (r * r)
    inside = d2 <= 1.0
    bulge = np.sqrt(np.clip(1 - d2, 0, 1))
    zz = za + s * (zb - za) - bulge * radius
    sub = zbuf[y0:y1 + 1, x0:x1 + 1]
    hit = inside & (zz < sub)
    sub[hit] = zz[hit]
    img[y0:y1 + 1, x0:x1 + 1][hit] = color[None, :] * (0.45 + 0.55 * bulge[hit])[:, None]


def render_scene(joints, parents, obj_tris, cam: Camera, radius: float = 0.035) -> np.ndarray:
    """joints (22, 3) or None; obj_tris (M, 3, 3) world-space or None."""
    cam.validate()
    H, W = cam.resolution
    img = np.tile(BACKGROUND, (H, W, 1))
    zbuf = np.full((H, W), np.inf)
    if obj_tris is not None and len(obj_tris):
        _raster_triangles(img, zbuf, cam, np.asarray(obj_tris, dtype=np.float64), OBJECT_COLOR)
    if joints is not None:
        for j, p in enumerate(parents):
            if p < 0:
                continue
            color = LEFT_COLOR if j in LEFT_JOINTS else BODY_COLOR
            _raster_capsule(img, zbuf, cam, joints[p], joints[j], radius, color)
        head = joints[15]
        _raster_capsule(img, zbuf, cam, head, head + np.array([0, 0.06, 0]), 0.08, BODY_COLOR)
    return np.clip(img, 0.0, 1.0)


def posed_triangles(seq: MotionSequence, frame: int, mesh: geometry.ObjectMesh) -> np.ndarray:
    R = rot6d_to_matrix(np.asarray(seq.obj_rot6d[frame], dtype=np.float64))
    return mesh.triangles @ R.T + np.asarray(seq.obj_transl[frame], dtype=np.float64)


def render_frame(seq: MotionSequence, frame: int, mesh: geometry.ObjectMesh | None, cam: Camera,
                 skel: Skeleton) -> np.ndarray:
    if not 0 <= frame < seq.length:
        raise IndexError(f"frame {frame} outside [0, {seq.length})")
    joints = forward_kinematics(seq, skel)[frame]
    tris = posed_triangles(seq, frame, mesh) if mesh is not None else None
    return render_scene(joints, skel.parent, tris, cam)


def render_keyframes(seq: MotionSequence, mesh, cam: Camera, skel: Skeleton):
    """(KeyframeTriple, three H x W x 3 images)."""
    kf = select_keyframes(seq.contact)
    return kf, [render_frame(seq, i, mesh, cam, skel) for i in kf.indices]


def contact_strip(images) -> np.ndarray:
    """Side-by-side keyframes separated by a thin white gap."""
    H = images[0].shape[0]
    gap = np.ones((H, 4, 3))
    parts = []
    for i, im in enumerate(images):
        if i:
            parts.append(gap)
        parts.append(im)
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------- text-to-image

def _annotation_of(prompt: str) -> str:
    return prompt.split(". Please first divide")[0]


def _stub_fixture(prompt: str, seed_image, cam: Camera):
    # imported here: toy_dataset pulls in the full IK stack
    from . import toy_dataset as td
    key = hashlib.sha256(prompt.encode() + array_to_png(np.asarray(seed_image)) if seed_image is not None
                         else prompt.encode()).digest()
    rng = np.random.default_rng(int.from_bytes(key[:8], "little"))
    ann = _annotation_of(prompt).lower()
    verb = next((v for v in td.VERBS if re.search(rf"\b{v}", ann)), None)
    kind = next((k for k, noun in td.OBJECT_NOUNS.items() if noun in ann), None)
    for attempt in range(50):
        task = td.sample_task(rng, verb, kind)
        try:
            seq = td.generate_sequence(task, int(rng.integers(10)), attempt)
            break
        except td.InfeasibleTask:
            continue
    _, imgs = render_keyframes(seq, task.mesh(), cam, td.sequence_skeleton(seq))
    # round-trip through PNG so stub output matches what an external backend returns
    return [png_to_array(array_to_png(im)) for im in imgs]


def t2i_generate(prompt: str, seed_image=None, mode: str = "stub", endpoint: str | None = None,
                 timeout: float = 60.0, cam: Camera = Camera()):
    """Three reference images for `prompt`.

    stub: deterministic fixtures keyed by (prompt, seed image).
    external: POST {"prompt", "seed_image": base64 PNG} to `endpoint` (default
    $VIHOI_T2I_ENDPOINT); the reply must be a JSON array of exactly 3 base64 PNGs.
    """
    if not prompt or not prompt.strip():
        raise ValueError("prompt must be non-empty")
    if mode == "stub":
        return _stub_fixture(prompt, seed_image, cam)
    if mode != "external":
        raise ValueError(f"unknown t2i mode {mode!r}")
    import httpx
    endpoint = endpoint or os.environ.get("VIHOI_T2I_ENDPOINT")
    if not endpoint:
        raise BackendUnavailable("VIHOI_T2I_ENDPOINT is not set")
    body = {"prompt": prompt}
    if seed_image is not None:
        body["seed_image"] = base64.b64encode(array_to_png(seed_image)).decode()
    try:
        resp = httpx.post(endpoint, json=body, timeout=timeout)
        resp.raise_for_status()
    except httpx.HTTPError as e:
        raise BackendUnavailable(f"text-to-image backend {endpoint}: {e}") from e
    data = resp.json()
    if isinstance(data, dict):
        data = data.get("images")
    if not isinstance(data, list) or len(data) != 3:
        n = len(data) if isinstance(data, list) else 0
        raise BadResponseCount(f"expected 3 images, got {n}")
    return [png_to_array(base64.b64decode(s), cam.resolution[0]) for s in data]


def seed_image(task, cam: Camera = Camera(), subject_id: int = 0) -> np.ndarray:
    """Static standing pose next to the object at its start pose."""
    from . import toy_dataset as td
    seq = td.static_sequence(task, subject_id)
    return render_frame(seq, 0, task.mesh(), cam, td.sequence_skeleton(seq))
