"""Motion sequences, rotation utilities, forward kinematics and storage.

The generator works on a 144-wide frame vector::

    [root translation (3) | 22 joint rotations in 6D (132) | object translation (3) | object 6D (6)]

The evaluator consumes a 147-wide vector in which the object's rotation is a
flattened 3x3 matrix instead of its 6D form.

A 6D rotation is the first two *columns* of the rotation matrix, completed by
Gram-Schmidt.
"""
from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DegenerateRotation, NotARotation, ShapeMismatch

N_JOINTS = 22
MODEL_DIM = 3 + N_JOINTS * 6 + 3 + 6  # 144
EVAL_DIM = 3 + N_JOINTS * 6 + 3 + 9  # 147

LEFT_WRIST, RIGHT_WRIST = 20, 21
LEFT_FOOT, RIGHT_FOOT = 10, 11
HAND_JOINTS = (LEFT_WRIST, RIGHT_WRIST)
FOOT_JOINTS = (LEFT_FOOT, RIGHT_FOOT)

SEQUENCE_SCHEMA = "vihoi.sequence/1"
FIELDS = ("root_transl", "joint_rot6d", "obj_transl", "obj_rot6d", "contact")

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


# ---------------------------------------------------------------- rotations

def rot6d_to_matrix(r) -> np.ndarray:
    """Map (..., 6) to (..., 3, 3) by Gram-Schmidt on the two column vectors."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise ShapeMismatch(f"expected trailing dimension 6, got {r.shape}")
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    n2 = np.linalg.norm(a2, axis=-1, keepdims=True)
    if np.any(n1 < 1e-8) or np.any(n2 < 1e-8):
        raise DegenerateRotation("6D rotation has a (near) zero column")
    b1 = a1 / n1
    cross = np.linalg.norm(np.cross(b1, a2 / n2), axis=-1)
    if np.any(cross < 1e-8):
        raise DegenerateRotation("6D rotation columns are parallel")
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = u2 / np.linalg.norm(u2, axis=-1, keepdims=True)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(m, atol: float = 1e-5) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise ShapeMismatch(f"expected (..., 3, 3), got {m.shape}")
    eye = np.eye(3)
    gram = np.swapaxes(m, -1, -2) @ m
    if np.any(np.abs(gram - eye) > atol):
        raise NotARotation("matrix is not orthonormal")
    if np.any(np.linalg.det(m) <= 0):
        raise NotARotation("matrix has negative determinant (reflection)")
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def axis_angle_to_matrix(axis, angle) -> np.ndarray:
    """Rodrigues formula; broadcasts over `angle`."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    angle = np.asarray(angle, dtype=np.float64)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * k + (1 - c) * (k @ k)


def random_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotations via normalized quaternions."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], axis=1)


# ---------------------------------------------------------------- skeleton

@dataclass(frozen=True)
class Skeleton:
    parent: tuple
    offset: np.ndarray  # (22, 3) meters
    names: tuple = ()

    def __post_init__(self):
        off = np.asarray(self.offset, dtype=np.float64)
        if off.shape != (len(self.parent), 3) or not np.all(np.isfinite(off)):
            raise ShapeMismatch("skeleton offsets must be finite (J, 3)")
        if self.parent[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j, p in enumerate(self.parent[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"joint {j} has invalid parent {p}")
        object.__setattr__(self, "offset", off)

    @property
    def n_joints(self) -> int:
        return len(self.parent)

    def scaled(self, s: float) -> "Skeleton":
        return Skeleton(self.parent, self.offset * s, self.names)

    def rest_positions(self) -> np.ndarray:
        """Joint positions of the identity pose with the root at the origin."""
        pos = np.zeros((self.n_joints, 3))
        for j in range(1, self.n_joints):
            pos[j] = pos[self.parent[j]] + self.offset[j]
        return pos


def default_skeleton(scale: float = 1.0) -> Skeleton:
    text = resources.files("vihoi.data").joinpath("skeleton.json").read_text()
    spec = json.loads(text)
    joints = spec["joints"]
    skel = Skeleton(
        parent=tuple(j["parent"] for j in joints),
        offset=np.array([j["offset"] for j in joints]),
        names=tuple(j["name"] for j in joints),
    )
    return skel if scale == 1.0 else skel.scaled(scale)


def pelvis_height(skel: Skeleton) -> float:
    """Root height that puts the foot joints of the rest pose on y = 0."""
    return float(-skel.rest_positions()[LEFT_FOOT, 1])


# ---------------------------------------------------------------- sequences

@dataclass
class MotionSequence:
    root_transl: np.ndarray
    joint_rot6d: np.ndarray
    obj_transl: np.ndarray
    obj_rot6d: np.ndarray
    contact: np.ndarray
    fps: float = 30.0
    text: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root_transl = np.asarray(self.root_transl, dtype=np.float64)
        self.joint_rot6d = np.asarray(self.joint_rot6d, dtype=np.float64)
        self.obj_transl = np.asarray(self.obj_transl, dtype=np.float64)
        self.obj_rot6d = np.asarray(self.obj_rot6d, dtype=np.float64)
        self.contact = np.asarray(self.contact).astype(bool)
        L = self.root_transl.shape[0]
        expected = {
            "root_transl": (L, 3),
            "joint_rot6d": (L, N_JOINTS, 6),
            "obj_transl": (L, 3),
            "obj_rot6d": (L, 6),
            "contact": (L, 2),
        }
        if L < 2:
            raise ShapeMismatch("a sequence needs at least 2 frames")
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {got}")

    @property
    def length(self) -> int:
        return self.root_transl.shape[0]

    def validate_rotations(self):
        """Raise DegenerateRotation if any 6D block cannot be completed."""
        rot6d_to_matrix(self.joint_rot6d)
        rot6d_to_matrix(self.obj_rot6d)

    def obj_rotmat(self) -> np.ndarray:
        return rot6d_to_matrix(self.obj_rot6d)

    def to_model_vector(self) -> np.ndarray:
        L = self.length
        return np.concatenate([
            self.root_transl,
            self.joint_rot6d.reshape(L, -1),
            self.obj_transl,
            self.obj_rot6d,
        ], axis=1)

    @classmethod
    def from_model_vector(cls, x, contact=None, **kw) -> "MotionSequence":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != MODEL_DIM:
            raise ShapeMismatch(f"expected (L, {MODEL_DIM}), got {x.shape}")
        L = x.shape[0]
        if contact is None:
            contact = np.zeros((L, 2), dtype=bool)
        return cls(
            root_transl=x[:, :3],
            joint_rot6d=x[:, 3:135].reshape(L, N_JOINTS, 6),
            obj_transl=x[:, 135:138],
            obj_rot6d=x[:, 138:144],
            contact=contact,
            **kw,
        )

    def copy(self, **changes) -> "MotionSequence":
        kw = dict(
            root_transl=self.root_transl.copy(),
            joint_rot6d=self.joint_rot6d.copy(),
            obj_transl=self.obj_transl.copy(),
            obj_rot6d=self.obj_rot6d.copy(),
            contact=self.contact.copy(),
            fps=self.fps,
            text=self.text,
            meta=dict(self.meta),
        )
        kw.update(changes)
        return MotionSequence(**kw)


def forward_kinematics(seq: MotionSequence, skel: Skeleton, return_rotations: bool = False):
    """World joint positions (L, 22, 3); the root sits at `root_transl`."""
    local = rot6d_to_matrix(seq.joint_rot6d)  # (L, J, 3, 3)
    L, J = local.shape[:2]
    if J != skel.n_joints:
        raise ShapeMismatch(f"sequence has {J} joints, skeleton {skel.n_joints}")
    world_r = np.empty_like(local)
    pos = np.empty((L, J, 3))
    world_r[:, 0] = local[:, 0]
    pos[:, 0] = seq.root_transl
    for j in range(1, J):
        p = skel.parent[j]
        world_r[:, j] = world_r[:, p] @ local[:, j]
        pos[:, j] = pos[:, p] + world_r[:, p] @ skel.offset[j]
    if return_rotations:
        return pos, world_r
    return pos


def to_eval_representation(seq: MotionSequence) -> np.ndarray:
    """(L, 147): root | joint 6D | object translation | object rotation matrix (row-major)."""
    L = seq.length
    rot = seq.obj_rotmat().reshape(L, 9)
    return np.concatenate([
        seq.root_transl,
        seq.joint_rot6d.reshape(L, -1),
        seq.obj_transl,
        rot,
    ], axis=1)


def obj_rot6d_from_eval(ev: np.ndarray) -> np.ndarray:
    ev = np.asarray(ev, dtype=np.float64)
    if ev.shape[-1] != EVAL_DIM:
        raise ShapeMismatch(f"expected width {EVAL_DIM}, got {ev.shape[-1]}")
    m = ev[..., 138:147].reshape(ev.shape[:-1] + (3, 3))
    return matrix_to_rot6d(m)


# ---------------------------------------------------------------- storage

def _field_arrays(seq: MotionSequence) -> dict:
    return {
        "root_transl": seq.root_transl,
        "joint_rot6d": seq.joint_rot6d,
        "obj_transl": seq.obj_transl,
        "obj_rot6d": seq.obj_rot6d,
        "contact": seq.contact.astype(np.float64),
    }


def _sequence_payload(seq: MotionSequence, meta: dict | None):
    arrays = {k: np.ascontiguousarray(v, dtype="<f4") for k, v in _field_arrays(seq).items()}
    doc = {
        "schema": SEQUENCE_SCHEMA,
        "fps": float(seq.fps),
        "length": seq.length,
        "text": seq.text,
        "fields": {k: {"file": f"{k}.f32", "shape": list(a.shape), "dtype": "<f4", "order": "C"}
                   for k, a in arrays.items()},
    }
    extra = dict(seq.meta)
    extra.update(meta or {})
    for key in ("schema", "fps", "length", "text", "fields"):
        extra.pop(key, None)
    doc.update(extra)
    meta_bytes = (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()
    return meta_bytes, {f"{k}.f32": a.tobytes() for k, a in arrays.items()}


def quantize(seq: MotionSequence) -> MotionSequence:
    """Round every field through float32, matching what storage keeps."""
    arrays = {k: np.asarray(v, dtype="<f4").astype(np.float64) for k, v in _field_arrays(seq).items()}
    return seq.copy(
        root_transl=arrays["root_transl"],
        joint_rot6d=arrays["joint_rot6d"],
        obj_transl=arrays["obj_transl"],
        obj_rot6d=arrays["obj_rot6d"],
    )


def save_sequence(seq: MotionSequence, path, meta: dict | None = None) -> Path:
    """Write the directory container: meta.json plus one little-endian float32 file per field."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta_bytes, blobs = _sequence_payload(seq, meta)
    for name, data in blobs.items():
        (path / name).write_bytes(data)
    (path / "meta.json").write_bytes(meta_bytes)
    return path


def save_sequence_archive(seq: MotionSequence, path, meta: dict | None = None) -> Path:
    """Single-file variant: an uncompressed zip holding the same files."""
    path = Path(path)
    meta_bytes, blobs = _sequence_payload(seq, meta)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name, data in [("meta.json", meta_bytes)] + sorted(blobs.items()):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)
    os.replace(tmp, path)
    return path


def _decode(meta_bytes: bytes, read) -> MotionSequence:
    doc = json.loads(meta_bytes)
    if doc.get("schema") != SEQUENCE_SCHEMA:
        raise ValueError(f"unknown sequence schema {doc.get('schema')!r}")
    arrays = {}
    for name in FIELDS:
        spec = doc["fields"][name]
        arrays[name] = np.frombuffer(read(spec["file"]), dtype="<f4").reshape(spec["shape"])
    extra = {k: v for k, v in doc.items() if k not in ("schema", "fps", "length", "text", "fields")}
    return MotionSequence(
        root_transl=arrays["root_transl"],
        joint_rot6d=arrays["joint_rot6d"],
        obj_transl=arrays["obj_transl"],
        obj_rot6d=arrays["obj_rot6d"],
        contact=arrays["contact"] > 0.5,
        fps=doc["fps"],
        text=doc["text"],
        meta=extra,
    )


def load_sequence(path) -> MotionSequence:
    path = Path(path)
    if path.is_dir():
        return _decode((path / "meta.json").read_bytes(), lambda n: (path / n).read_bytes())
    with zipfile.ZipFile(path) as zf:
        return _decode(zf.read("meta.json"), zf.read)


def sequence_bytes(seq: MotionSequence) -> bytes:
    """Canonical serialized form, used for hashing and determinism checks."""
    buf = io.BytesIO()
    meta_bytes, blobs = _sequence_payload(seq, None)
    buf.write(meta_bytes)
    for name in sorted(blobs):
        buf.write(blobs[name])
    return buf.getvalue()
