"""Procedural text-annotated HOI sequences with geometric contact labels.

Every sequence follows approach -> contact -> manipulate -> release. The
human starts at the origin facing +z, bends at the pelvis and squats as
needed, and places both wrists 2 cm off the object surface via two-bone IK.
Contact labels are then *measured*: a hand is in contact when the wrist is
within `CONTACT_THRESHOLD` of the posed object surface.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .errors import EmptySplit, InfeasibleTask
from .motion import (HAND_JOINTS, IDENTITY_6D, N_JOINTS, MotionSequence, Skeleton,
                     axis_angle_to_matrix, default_skeleton, forward_kinematics,
                     matrix_to_rot6d, pelvis_height, quantize, rot6d_to_matrix, save_sequence)

VERBS = ("lift", "push", "pull", "kick", "rotate")
OBJECT_NOUNS = {"box": "box", "cylinder": "cylinder", "lamp_composite": "floor lamp",
                "table_composite": "table"}
CONTACT_THRESHOLD = 0.05  # meters; shared with the contact metrics
GRIP_GAP = 0.02
WORKSPACE_HALF = 2.0
LEDGE_HEIGHT = 0.3
INDEX_SCHEMA = "vihoi.index/1"

DIM_RANGES = {
    "box": ((0.35, 0.5), (0.45, 0.8), (0.3, 0.45)),
    "cylinder": ((0.17, 0.25), (0.5, 0.85)),
    "lamp_composite": ((0.15, 0.2), (0.015, 0.03), (1.2, 1.6)),
    "table_composite": ((0.6, 0.9), (0.55, 0.75), (0.45, 0.6)),
}


@dataclass(frozen=True)
class ToyTask:
    verb: str
    object_kind: str
    object_dims: tuple
    start: tuple            # object start position (x, y, z)
    end: tuple              # object end position
    carry_height: float = 0.0
    yaw: float = 0.0        # final rotation about the vertical axis
    duration_frames: int = 64

    def __post_init__(self):
        if self.verb not in VERBS:
            raise ValueError(f"unknown verb {self.verb!r}")
        if self.object_kind not in geometry.PRIMITIVE_KINDS:
            raise ValueError(f"unknown object kind {self.object_kind!r}")
        if self.duration_frames < 30:
            raise ValueError("duration must be at least 30 frames")
        for p in (self.start, self.end):
            if abs(p[0]) > WORKSPACE_HALF or abs(p[2]) > WORKSPACE_HALF:
                raise ValueError(f"waypoint {p} outside the 4 m x 4 m workspace")

    def mesh(self) -> geometry.ObjectMesh:
        return geometry.make_primitive(self.object_kind, self.object_dims)

    def text(self) -> str:
        noun = OBJECT_NOUNS[self.object_kind]
        if self.verb == "lift":
            return f"Lift the {noun}, and set it back down."
        if self.verb == "push":
            return f"Push the {noun} forward, off the ledge and down to the floor."
        if self.verb == "pull":
            return f"Pull the {noun} backward along the floor."
        if self.verb == "kick":
            return f"Hold the {noun} steady and kick it forward."
        side = "left" if self.yaw > 0 else "right"
        return f"Rotate the {noun} to the {side} in place."


@dataclass(frozen=True)
class SplitSpec:
    mode: str               # "by_subject" | "by_object_category"
    held_out: tuple

    def __post_init__(self):
        if self.mode not in ("by_subject", "by_object_category"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if not self.held_out:
            raise ValueError("held_out must be non-empty")


def subject_scale(subject_id: int) -> float:
    return float(0.9 + 0.2 * np.random.default_rng([7321, int(subject_id)]).random())


def _smooth(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3 - 2 * s)


# ---------------------------------------------------------------- tasks

def sample_task(rng: np.random.Generator, verb: str | None = None, kind: str | None = None,
                duration: int = 64) -> ToyTask:
    verb = verb or VERBS[rng.integers(len(VERBS))]
    kind = kind or geometry.PRIMITIVE_KINDS[rng.integers(len(geometry.PRIMITIVE_KINDS))]
    dims = tuple(round(float(rng.uniform(lo, hi)), 4) for lo, hi in DIM_RANGES[kind])
    depth = 2 * dims[0] if kind in ("cylinder", "lamp_composite") else dims[2]
    if kind == "lamp_composite":
        depth = 2 * dims[0]
    gap = rng.uniform(0.3, 0.38) if kind != "lamp_composite" else rng.uniform(0.2, 0.28)
    x0 = rng.uniform(-0.05, 0.05)
    z0 = gap + depth / 2
    y0 = LEDGE_HEIGHT if verb == "push" else 0.0
    carry, yaw, end = 0.0, 0.0, (x0, 0.0, z0)
    if verb == "lift":
        carry = rng.uniform(0.2, 0.35)
        end = (x0, 0.0, z0 + rng.uniform(0.0, 0.25))
    elif verb == "push":
        end = (x0, 0.0, z0 + rng.uniform(0.3, 0.5))
    elif verb == "pull":
        end = (x0, 0.0, z0 - rng.uniform(0.25, 0.45))
    elif verb == "kick":
        end = (x0, 0.0, z0 + rng.uniform(0.2, 0.35))
    else:
        yaw = float(rng.choice([-1, 1]) * rng.uniform(0.5, 0.9))
    r = lambda v: tuple(round(float(x), 4) for x in v)  # noqa: E731
    return ToyTask(verb, kind, dims, r((x0, y0, z0)), r(end), round(float(carry), 4),
                   round(yaw, 4), duration)


def grip_points(task: ToyTask) -> np.ndarray:
    """(2, 3) left/right wrist targets in the object frame."""
    g = GRIP_GAP
    d = task.object_dims
    back = task.verb == "push"
    if task.object_kind == "box":
        w, h, dep = d
        if back:
            x = min(0.12, w / 2 - 0.04)
            return np.array([[x, 0.8 * h, -(dep / 2 + g)], [-x, 0.8 * h, -(dep / 2 + g)]])
        return np.array([[w / 2 + g, 0.8 * h, 0.0], [-(w / 2 + g), 0.8 * h, 0.0]])
    if task.object_kind == "cylinder":
        r, h = d
        if back:
            a = np.arcsin(min(0.1 / r, 0.9))
            rr = r + g
            return np.array([[rr * np.sin(a), 0.8 * h, -rr * np.cos(a)],
                             [-rr * np.sin(a), 0.8 * h, -rr * np.cos(a)]])
        return np.array([[r + g, 0.8 * h, 0.0], [-(r + g), 0.8 * h, 0.0]])
    if task.object_kind == "lamp_composite":
        _, pole_r, height = d
        y = 0.55 * height
        return np.array([[pole_r + g, y, 0.0], [-(pole_r + g), y, 0.0]])
    w, h, dep = d
    y = h - 0.02
    if back:
        return np.array([[0.2, y, -(dep / 2 + g)], [-0.2, y, -(dep / 2 + g)]])
    return np.array([[w / 2 + g, y, 0.0], [-(w / 2 + g), y, 0.0]])


def object_trajectory(task: ToyTask, s: np.ndarray):
    """Object position (n, 3) and rotation (n, 3, 3) at manipulation progress s."""
    start, end = np.array(task.start), np.array(task.end)
    prog = _smooth((s - 0.2) / 0.4) if task.verb == "kick" else _smooth(s)
    pos = start + (end - start) * prog[:, None]
    if task.verb == "push":
        pos[:, 1] = start[1] + (end[1] - start[1]) * _smooth((s - 0.3) / 0.7)
    bump = _smooth(s / 0.35) * _smooth((1 - s) / 0.35)
    pos[:, 1] += task.carry_height * bump
    rot = axis_angle_to_matrix([0, 1, 0], task.yaw * _smooth(s))
    return pos, rot


# ---------------------------------------------------------------- kinematics

def _frame(d, ref):
    e1 = d / np.linalg.norm(d)
    e2 = ref - np.dot(ref, e1) * e1
    n = np.linalg.norm(e2)
    if n < 1e-9:
        alt = np.array([1.0, 0, 0]) if abs(e1[0]) < 0.9 else np.array([0, 0, 1.0])
        e2 = alt - np.dot(alt, e1) * e1
        n = np.linalg.norm(e2)
    e2 = e2 / n
    return np.stack([e1, e2, np.cross(e1, e2)], axis=1)


def _aim(rest_dir, rest_ref, new_dir, new_ref):
    """Rotation sending rest_dir to new_dir (and rest_ref toward new_ref)."""
    return _frame(new_dir, new_ref) @ _frame(rest_dir, rest_ref).T


def two_bone(root, target, a, b, pole):
    """Middle joint position; the end reaches `target` whenever |a-b| <= d <= a+b."""
    v = target - root
    d = np.linalg.norm(v)
    u = v / d
    dc = np.clip(d, abs(a - b) + 1e-9, a + b - 1e-9)
    cos_a = (a * a + dc * dc - b * b) / (2 * a * dc)
    w = pole - np.dot(pole, u) * u
    nw = np.linalg.norm(w)
    w = _frame(u, pole)[:, 1] if nw < 1e-9 else w / nw
    mid = root + a * (cos_a * u + np.sqrt(max(0.0, 1 - cos_a ** 2)) * w)
    end = mid + b * (root + dc * u - mid) / np.linalg.norm(root + dc * u - mid)
    return mid, end


def _rot_x(phi):
    return axis_angle_to_matrix([1, 0, 0], phi)


class PoseBuilder:
    """Builds local joint rotations for a posture (bend, squat) and wrist targets."""

    SPINE_TO_SHOULDER = {20: (3, 6, 9, 13, 16), 21: (3, 6, 9, 14, 17)}

    def __init__(self, skel: Skeleton):
        self.skel = skel
        self.pelvis_h = pelvis_height(skel)
        off = skel.offset
        self.shoulder_rel = {h: off[list(c)].sum(axis=0) for h, c in self.SPINE_TO_SHOULDER.items()}
        self.upper = {20: np.linalg.norm(off[18]), 21: np.linalg.norm(off[19])}
        self.lower = {20: np.linalg.norm(off[20]), 21: np.linalg.norm(off[21])}
        rest = skel.rest_positions()
        self.ankle_rel = {7: rest[7], 8: rest[8]}
        self.thigh = {1: np.linalg.norm(off[4]), 2: np.linalg.norm(off[5])}
        self.shin = {1: np.linalg.norm(off[7]), 2: np.linalg.norm(off[8])}
        self.scale = np.linalg.norm(off[18]) / 0.26
        self.hip_drop = abs(off[1][1])

    def root_position(self, xz, squat, bend=0.0):
        # bending at the pelvis lifts the hips; drop the root to keep the legs in reach
        drop = self.hip_drop * (1 - np.cos(bend))
        return np.array([xz[0], self.pelvis_h - squat - drop, xz[1]])

    def shoulder(self, root_pos, bend, hand):
        return root_pos + _rot_x(bend) @ self.shoulder_rel[hand]

    def arm_pole(self, hand):
        side = 1.0 if hand == 20 else -1.0
        return np.array([side * 0.6, -1.0, -0.4])

    def rest_wrist(self, root_pos, bend, hand):
        side = 1.0 if hand == 20 else -1.0
        return self.shoulder(root_pos, bend, hand) + _rot_x(bend) @ (
            self.scale * np.array([side * 0.06, -0.46, 0.08]))

    def reachable(self, root_pos, bend, hand, target, margin=0.96):
        d = np.linalg.norm(target - self.shoulder(root_pos, bend, hand))
        a, b = self.upper[hand], self.lower[hand]
        return abs(a - b) + 0.08 <= d <= margin * (a + b)

    def pose(self, root_pos, bend, wrists, ankles=None):
        """Local rotation matrices (22, 3, 3) placing the wrists at `wrists` (dict hand->pos)."""
        skel, off = self.skel, self.skel.offset
        R = np.tile(np.eye(3), (N_JOINTS, 1, 1))
        w0 = _rot_x(bend)
        R[0] = w0
        for hand, elbow, shoulder_j, collar in ((20, 18, 16, 13), (21, 19, 17, 14)):
            s = self.shoulder(root_pos, bend, hand)
            pole = self.arm_pole(hand)
            e, w = two_bone(s, wrists[hand], self.upper[hand], self.lower[hand], pole)
            down = np.array([0.0, -1.0, 0.0])
            w_sh = _aim(off[elbow], down, e - s, pole)
            w_el = _aim(off[hand], down, w - e, pole)
            R[shoulder_j] = w0.T @ w_sh  # collar world == root world
            R[elbow] = w_sh.T @ w_el
        for hip, knee, ankle in ((1, 4, 7), (2, 5, 8)):
            h = root_pos + w0 @ off[hip]
            target = ankles[ankle] if ankles is not None else self.default_ankle(root_pos, ankle)
            pole = np.array([0.0, 0.0, 1.0])
            k, a = two_bone(h, target, self.thigh[hip], self.shin[hip], pole)
            w_hip = _aim(off[knee], pole, k - h, pole)
            w_knee = _aim(off[ankle], pole, a - k, pole)
            R[hip] = w0.T @ w_hip
            R[knee] = w_hip.T @ w_knee
            R[ankle] = w_knee.T  # keep the foot flat
        return R

    def default_ankle(self, root_pos, ankle):
        rel = self.ankle_rel[ankle]
        return np.array([root_pos[0] + rel[0], self.pelvis_h + rel[1], root_pos[2] + rel[2]])


def _choose_posture(pb: PoseBuilder, root_xzs, targets):
    """Smallest (bend, squat) reaching every target in `targets` (n, 2, 3)."""
    for cost, bend, squat in sorted(
            (b + 2 * q, b, q) for b in np.radians(np.arange(0, 71, 5)) for q in np.arange(0, 0.36, 0.05)):
        ok = True
        for xz, tgt in zip(root_xzs, targets):
            rp = pb.root_position(xz, squat, bend)
            if not (pb.reachable(rp, bend, 20, tgt[0]) and pb.reachable(rp, bend, 21, tgt[1])):
                ok = False
                break
        if ok:
            return float(bend), float(squat)
    raise InfeasibleTask("wrist targets exceed the reach of the skeleton")


# ---------------------------------------------------------------- sequences

def hand_object_distances(seq: MotionSequence, mesh: geometry.ObjectMesh, skel: Skeleton,
                          signed: bool = False) -> np.ndarray:
    """(L, 2) distance from each wrist to the posed object surface."""
    joints = forward_kinematics(seq, skel)[:, HAND_JOINTS]  # (L, 2, 3)
    rot = rot6d_to_matrix(seq.obj_rot6d)
    local = np.einsum("lji,lhj->lhi", rot, joints - seq.obj_transl[:, None, :])
    fn = geometry.signed_distance if signed else geometry.unsigned_distance
    return np.asarray(fn(mesh, local.reshape(-1, 3))).reshape(-1, 2)


def phase_bounds(L: int, rng: np.random.Generator):
    a_end = int(round(0.28 * L)) + int(rng.integers(-2, 3))
    m_start = a_end + max(2, int(round(0.06 * L)))
    m_end = m_start + int(round(0.4 * L)) + int(rng.integers(-2, 3))
    r_start = m_end + max(2, int(round(0.06 * L)))
    r_end = min(L - 1, r_start + int(round(0.2 * L)))
    return a_end, m_start, m_end, r_start, r_end


def generate_sequence(task: ToyTask, subject_id: int, seed: int, fps: float = 30.0,
                      with_labels: bool = True) -> MotionSequence:
    rng = np.random.default_rng([int(seed), int(subject_id), 99])
    scale = subject_scale(subject_id)
    skel = default_skeleton(scale)
    pb = PoseBuilder(skel)
    mesh = task.mesh()
    L = task.duration_frames
    a_end, m_start, m_end, r_start, r_end = phase_bounds(L, rng)

    frames = np.arange(L)
    s = np.clip((frames - m_start) / (m_end - m_start), 0.0, 1.0)
    obj_pos, obj_rot = object_trajectory(task, s)
    follow = task.verb in ("lift", "push", "pull", "kick")
    root_xz = np.zeros((L, 2))
    if follow:
        root_xz += (obj_pos[:, [0, 2]] - obj_pos[0, [0, 2]])

    grips = grip_points(task)
    grip_world = np.einsum("lij,hj->lhi", obj_rot, grips) + obj_pos[:, None, :]
    outward = grips * np.array([1.0, 0.0, 1.0])
    outward /= np.linalg.norm(outward, axis=1, keepdims=True)
    pre_world = grip_world + 0.12 * np.einsum("lij,hj->lhi", obj_rot, outward)
    hold = slice(a_end, r_start + 1)
    bend, squat = _choose_posture(pb, root_xz[hold], grip_world[hold])

    # approach/release progress of posture and hands
    reach = np.where(frames <= a_end, _smooth(frames / a_end),
                     np.where(frames < r_start, 1.0, 1.0 - _smooth((frames - r_start) / max(1, r_end - r_start))))
    kick = task.verb == "kick"
    rot = np.empty((L, N_JOINTS, 3, 3))
    root_transl = np.empty((L, 3))
    for f in range(L):
        b, q = bend * reach[f], squat * reach[f]
        rp = pb.root_position(root_xz[f], q, b)
        wrists = {}
        for i, hand in enumerate(HAND_JOINTS):
            rest = pb.rest_wrist(rp, b, hand)
            # go through a stand-off point so the hand never cuts through the object
            r = reach[f]
            if r >= 0.5:
                wrists[hand] = pre_world[f, i] + (grip_world[f, i] - pre_world[f, i]) * (2 * r - 1)
            else:
                wrists[hand] = rest + (pre_world[f, i] - rest) * (2 * r)
        ankles = None
        if kick:
            ankles = {7: pb.default_ankle(rp, 7), 8: pb.default_ankle(rp, 8)}
            swing = _smooth((s[f] - 0.05) / 0.25) * _smooth((0.65 - s[f]) / 0.2)
            ankles[8] = ankles[8] + swing * np.array([0.0, 0.12, 0.3]) * pb.scale
        rot[f] = pb.pose(rp, b, wrists, ankles)
        root_transl[f] = rp

    seq = MotionSequence(
        root_transl=root_transl,
        joint_rot6d=matrix_to_rot6d(rot),
        obj_transl=obj_pos,
        obj_rot6d=matrix_to_rot6d(obj_rot),
        contact=np.zeros((L, 2), dtype=bool),
        fps=fps,
        text=task.text(),
    )
    seq = quantize(seq)
    if with_labels:
        seq.contact = hand_object_distances(seq, mesh, skel) <= CONTACT_THRESHOLD
        _check_contact_consistency(seq)
    seq.meta = {
        "subject": int(subject_id),
        "subject_scale": scale,
        "verb": task.verb,
        "object": {"kind": task.object_kind, "dims": list(task.object_dims)},
        "task": asdict(task),
        "has_contact_labels": bool(with_labels),
    }
    return seq


def _check_contact_consistency(seq: MotionSequence):
    moved = np.any(np.abs(np.diff(seq.obj_transl, axis=0)) > 0, axis=1) | \
        np.any(np.abs(np.diff(seq.obj_rot6d, axis=0)) > 0, axis=1)
    any_contact = seq.contact.any(axis=1)
    if np.any(moved & ~(any_contact[1:] & any_contact[:-1])):
        raise InfeasibleTask("object moves without hand contact")
    for h in range(2):
        runs = np.diff(np.concatenate([[0], seq.contact[:, h].astype(int), [0]]))
        if (runs == 1).sum() > 1:
            raise InfeasibleTask("contact is not one contiguous run")


def static_sequence(task: ToyTask, subject_id: int = 0, frames: int = 2) -> MotionSequence:
    """Standing pose with arms at rest next to the object at its start pose."""
    skel = default_skeleton(subject_scale(subject_id))
    pb = PoseBuilder(skel)
    rp = pb.root_position((0.0, 0.0), 0.0)
    R = pb.pose(rp, 0.0, {h: pb.rest_wrist(rp, 0.0, h) for h in HAND_JOINTS})
    return MotionSequence(
        root_transl=np.tile(rp, (frames, 1)),
        joint_rot6d=np.tile(matrix_to_rot6d(R), (frames, 1, 1)),
        obj_transl=np.tile(task.start, (frames, 1)),
        obj_rot6d=np.tile(IDENTITY_6D, (frames, 1)),
        contact=np.zeros((frames, 2), dtype=bool),
        text=task.text(),
        meta={"subject": subject_id, "subject_scale": subject_scale(subject_id),
              "object": {"kind": task.object_kind, "dims": list(task.object_dims)}},
    )


def sequence_skeleton(seq: MotionSequence) -> Skeleton:
    return default_skeleton(seq.meta.get("subject_scale", 1.0))


def sequence_mesh(seq: MotionSequence) -> geometry.ObjectMesh:
    obj = seq.meta["object"]
    return geometry.make_primitive(obj["kind"], obj["dims"])


# ---------------------------------------------------------------- corpus

@dataclass
class DatasetConfig:
    n_sequences: int = 64
    n_subjects: int = 10
    frames: int = 64
    fps: float = 30.0
    verbs: tuple = VERBS
    object_kinds: tuple = geometry.PRIMITIVE_KINDS
    held_out_subjects: tuple = (8, 9)
    held_out_objects: tuple = ("cylinder",)
    contact_labels: bool = True
    extra: dict = field(default_factory=dict)


def item_seed(seed: int, i: int) -> int:
    h = hashlib.sha256(f"vihoi:{seed}:{i}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def _balanced(values, n, rng):
    reps = list(values) * (n // len(values) + 1)
    out = reps[:n]
    rng.shuffle(out)
    return out


def plan_corpus(n: int, cfg: DatasetConfig, seed: int):
    rng = np.random.default_rng([int(seed), 1])
    verbs = _balanced(cfg.verbs, n, rng)
    kinds = _balanced(cfg.object_kinds, n, rng)
    subjects = _balanced(range(cfg.n_subjects), n, rng)
    return list(zip(verbs, kinds, subjects))


def make_sequence_for(verb, kind, subject, seed, cfg: DatasetConfig, attempts: int = 50):
    for k in range(attempts):
        rng = np.random.default_rng([seed, k])
        try:
            task = sample_task(rng, verb, kind, cfg.frames)
            return generate_sequence(task, subject, seed + k, cfg.fps, cfg.contact_labels)
        except InfeasibleTask:
            continue
    raise InfeasibleTask(f"no feasible {verb}/{kind} task after {attempts} attempts")


def split_tags(subject: int, kind: str, cfg: DatasetConfig) -> dict:
    return {
        "by_subject": "test" if subject in cfg.held_out_subjects else "train",
        "by_object_category": "test" if kind in cfg.held_out_objects else "train",
    }


def build_corpus(n_sequences: int, cfg: DatasetConfig, seed: int, out_dir) -> Path:
    """Write `sequences/<id>/` containers plus `index.json`; deterministic per seed."""
    out = Path(out_dir)
    seq_root = out / "sequences"
    if seq_root.exists():
        shutil.rmtree(seq_root)
    seq_root.mkdir(parents=True)
    entries = []
    for i, (verb, kind, subject) in enumerate(plan_corpus(n_sequences, cfg, seed)):
        sid = f"seq_{i:04d}"
        seq = make_sequence_for(verb, kind, subject, item_seed(seed, i), cfg)
        tags = split_tags(subject, kind, cfg)
        save_sequence(seq, seq_root / sid, {"id": sid, "split_tags": tags})
        entries.append({
            "id": sid,
            "subject": int(subject),
            "subject_scale": seq.meta["subject_scale"],
            "object_kind": kind,
            "object_dims": seq.meta["object"]["dims"],
            "verb": verb,
            "text": seq.text,
            "length": seq.length,
            "split_tags": tags,
        })
    index = {
        "schema": INDEX_SCHEMA,
        "seed": int(seed),
        "has_contact_labels": bool(cfg.contact_labels),
        "config": _jsonable(asdict(cfg)),
        "sequences": entries,
    }
    _atomic_write(out / "index.json", json.dumps(index, indent=2, sort_keys=True) + "\n")
    return out


def load_index(data_dir) -> dict:
    return json.loads((Path(data_dir) / "index.json").read_text())


def make_split(dataset, spec: SplitSpec):
    """(train ids, test ids); `dataset` is an index dict or a list of its entries."""
    entries = dataset["sequences"] if isinstance(dataset, dict) else list(dataset)
    key = "subject" if spec.mode == "by_subject" else "object_kind"
    held = set(spec.held_out)
    known = {e[key] for e in entries}
    if not held & known:
        raise EmptySplit(f"none of {sorted(held, key=str)} appear in the dataset")
    train = [e["id"] for e in entries if e[key] not in held]
    test = [e["id"] for e in entries if e[key] in held]
    if not train or not test:
        raise EmptySplit("split leaves train or test empty")
    return train, test


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
