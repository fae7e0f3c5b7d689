import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import identity_sequence, random_sequence
from vihoi.errors import DegenerateRotation, NotARotation, ShapeMismatch
from vihoi.motion import (EVAL_DIM, MODEL_DIM, N_JOINTS, MotionSequence, Skeleton, default_skeleton,
                          forward_kinematics, load_sequence, matrix_to_rot6d, obj_rot6d_from_eval, pelvis_height,
                          random_rotations, rot6d_to_matrix, save_sequence, save_sequence_archive,
                          sequence_bytes, to_eval_representation)


def test_identity_6d():
    np.testing.assert_array_equal(rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))
    np.testing.assert_array_equal(matrix_to_rot6d(np.eye(3)), [1, 0, 0, 0, 1, 0])


def test_quarter_turn_about_z():
    m = rot6d_to_matrix([0, 1, 0, -1, 0, 0])
    expected = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], float)
    np.testing.assert_allclose(m, expected, atol=1e-12)


@pytest.mark.parametrize("r", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 0, 0, 0], [1, 2, 3, 2, 4, 6], [1e-9, 0, 0, 0, 1, 0]])
def test_degenerate_6d(r):
    with pytest.raises(DegenerateRotation):
        rot6d_to_matrix(r)


def test_random_6d_orthonormal():
    rng = np.random.default_rng(0)
    r = rng.normal(size=(1000, 6))
    m = rot6d_to_matrix(r)
    err = np.abs(np.swapaxes(m, -1, -2) @ m - np.eye(3)).max()
    assert err < 1e-6
    np.testing.assert_allclose(np.linalg.det(m), 1.0, atol=1e-9)


def test_rotation_round_trip():
    R = random_rotations(1000, np.random.default_rng(1))
    assert np.abs(rot6d_to_matrix(matrix_to_rot6d(R)) - R).max() < 1e-6


def test_reflection_rejected():
    with pytest.raises(NotARotation):
        matrix_to_rot6d(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(NotARotation):
        matrix_to_rot6d(np.diag([1.0, 2.0, 1.0]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-10, 10)))
def test_6d_property(r):
    a, b = r[:3], r[3:]
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3 or \
            np.linalg.norm(np.cross(a / np.linalg.norm(a), b / np.linalg.norm(b))) < 1e-3:
        return
    m = rot6d_to_matrix(r)
    assert np.abs(m.T @ m - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(m) - 1) < 1e-9
    # first column is the normalised first vector; the round trip is idempotent
    np.testing.assert_allclose(m[:, 0], a / np.linalg.norm(a), atol=1e-12)
    np.testing.assert_allclose(rot6d_to_matrix(matrix_to_rot6d(m)), m, atol=1e-9)


def test_skeleton_tree_and_defaults():
    skel = default_skeleton()
    assert skel.n_joints == N_JOINTS == 22
    assert skel.parent[0] == -1
    assert all(0 <= p < j for j, p in enumerate(skel.parent) if j)
    assert abs(pelvis_height(skel) - 0.93) < 0.02
    with pytest.raises(ValueError):
        Skeleton((-1, 2, 0), np.zeros((3, 3)))


def test_fk_identity_is_chain_sum():
    skel = default_skeleton()
    seq = identity_sequence(3, root=(0.3, 1.0, -0.2))
    pos = forward_kinematics(seq, skel)
    np.testing.assert_allclose(pos[0], skel.rest_positions() + [0.3, 1.0, -0.2], atol=1e-12)
    np.testing.assert_allclose(pos[:, 0], seq.root_transl)


def test_fk_two_bone_chain_quarter_turn():
    skel = Skeleton((-1, 0, 1), np.array([[0, 0, 0], [1.0, 0, 0], [0.5, 0, 0]]))
    rz = matrix_to_rot6d(np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]]))
    rot = np.tile([1.0, 0, 0, 0, 1, 0], (1, 3, 1))
    rot[0, 0] = rz
    seq = _tiny(rot, skel)
    pos = forward_kinematics(seq, skel)
    # 90 deg about z at the root: +x bones point along +y
    np.testing.assert_allclose(pos[0, 2], [0, 1.5, 0], atol=1e-12)
    rot[0, 1] = rz  # a second quarter turn at the middle joint bends the tip to -x
    pos = forward_kinematics(_tiny(rot, skel), skel)
    np.testing.assert_allclose(pos[0, 2], [-0.5, 1.0, 0], atol=1e-12)


def _tiny(rot, skel):
    # FK only reads root_transl and joint_rot6d; wrap the 3-joint case in a padded container
    class S:
        pass
    s = S()
    s.root_transl = np.zeros((rot.shape[0], 3))
    s.joint_rot6d = rot
    return s


def test_fk_translation_equivariance():
    rng = np.random.default_rng(3)
    seq = random_sequence(rng, 5)
    skel = default_skeleton(1.05)
    v = np.array([0.4, -0.1, 2.0])
    moved = seq.copy(root_transl=seq.root_transl + v)
    np.testing.assert_allclose(forward_kinematics(moved, skel), forward_kinematics(seq, skel) + v, atol=1e-12)


def test_eval_representation_layout():
    seq = identity_sequence(3)
    ev = to_eval_representation(seq)
    assert ev.shape == (3, EVAL_DIM) and EVAL_DIM == 147
    np.testing.assert_array_equal(ev[:, -9:], np.tile(np.eye(3).ravel(), (3, 1)))
    np.testing.assert_array_equal(ev[:, :3], seq.root_transl)
    np.testing.assert_array_equal(ev[:, 3:135], seq.joint_rot6d.reshape(3, -1))
    np.testing.assert_array_equal(ev[:, 135:138], seq.obj_transl)


def test_eval_representation_round_trip():
    seq = random_sequence(np.random.default_rng(5), 8)
    ev = to_eval_representation(seq)
    np.testing.assert_allclose(obj_rot6d_from_eval(ev), seq.obj_rot6d, atol=1e-6)
    blk = ev[:, -9:].reshape(-1, 3, 3)
    np.testing.assert_allclose(np.linalg.norm(blk, axis=1), 1, atol=1e-5)
    np.testing.assert_allclose(np.linalg.norm(blk, axis=2), 1, atol=1e-5)


def test_model_vector_round_trip():
    seq = random_sequence(np.random.default_rng(6), 4)
    x = seq.to_model_vector()
    assert x.shape == (4, MODEL_DIM) and MODEL_DIM == 144
    back = MotionSequence.from_model_vector(x)
    np.testing.assert_array_equal(back.to_model_vector(), x)


def test_sequence_invariants():
    with pytest.raises(ShapeMismatch):
        identity_sequence(1)
    seq = identity_sequence(3)
    with pytest.raises(ShapeMismatch):
        seq.copy(contact=np.zeros((2, 2), bool))


def test_container_round_trip(tmp_path):
    seq = random_sequence(np.random.default_rng(7), 5).copy(text="Pull the box backward along the floor.")
    d = save_sequence(seq, tmp_path / "seq", {"subject": 3})
    assert sorted(p.name for p in d.iterdir()) == sorted(
        ["meta.json", "root_transl.f32", "joint_rot6d.f32", "obj_transl.f32", "obj_rot6d.f32", "contact.f32"])
    assert (d / "root_transl.f32").stat().st_size == 5 * 3 * 4
    back = load_sequence(d)
    np.testing.assert_allclose(back.joint_rot6d, seq.joint_rot6d, atol=1e-6)
    np.testing.assert_array_equal(back.contact, seq.contact)
    assert back.text == seq.text and back.meta["subject"] == 3
    arch = save_sequence_archive(seq, tmp_path / "seq.zip", {"subject": 3})
    again = load_sequence(arch)
    assert sequence_bytes(again) == sequence_bytes(back)
