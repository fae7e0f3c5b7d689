import collections
import filecmp
import json

import numpy as np
import pytest

from vihoi import toy_dataset as td
from vihoi.errors import EmptySplit, InfeasibleTask
from vihoi.motion import FOOT_JOINTS, forward_kinematics, load_sequence


def feasible(rng, verb=None, kind=None, subject=0, seed=0):
    for k in range(50):
        task = td.sample_task(rng, verb, kind)
        try:
            return task, td.generate_sequence(task, subject, seed + k)
        except InfeasibleTask:
            continue
    raise AssertionError("no feasible task")


def runs(mask):
    d = np.diff(np.concatenate([[0], mask.astype(int), [0]]))
    return int((d == 1).sum())


def test_task_validation():
    with pytest.raises(ValueError):
        td.ToyTask("dance", "box", (0.4, 0.3, 0.4), (0, 0, 0.5), (0, 0, 0.5))
    with pytest.raises(ValueError):
        td.ToyTask("lift", "box", (0.4, 0.3, 0.4), (0, 0, 0.5), (0, 0, 0.5), duration_frames=20)
    with pytest.raises(ValueError):
        td.ToyTask("lift", "box", (0.4, 0.3, 0.4), (0, 0, 0.5), (2.5, 0, 0.5))


def test_lift_box_annotation_and_phases():
    task, seq = feasible(np.random.default_rng(0), "lift", "box")
    assert seq.text == "Lift the box, and set it back down."
    assert seq.length == task.duration_frames
    for h in range(2):
        assert runs(seq.contact[:, h]) == 1
    first = np.argmax(seq.contact.any(1))
    assert first > 0 and not seq.contact[0].any()      # approach before contact
    assert not seq.contact[-1].any()                    # released at the end
    assert seq.obj_transl[:, 1].max() > seq.obj_transl[0, 1] + 0.15   # actually lifted


def test_contact_labels_match_geometry_100_tasks():
    rng = np.random.default_rng(11)
    for i in range(100):
        task, seq = feasible(rng, subject=i % 10, seed=i * 7)
        skel = td.sequence_skeleton(seq)
        d = td.hand_object_distances(seq, task.mesh(), skel)
        assert np.all(d[seq.contact] <= td.CONTACT_THRESHOLD)
        assert np.all(d[~seq.contact] > td.CONTACT_THRESHOLD)
        # the object is static between frames unless some hand holds it on both
        moved = np.any(np.diff(seq.obj_transl, axis=0) != 0, 1) | np.any(np.diff(seq.obj_rot6d, axis=0) != 0, 1)
        held = seq.contact.any(1)
        assert not np.any(moved & ~(held[1:] & held[:-1]))


def test_every_verb_and_kind_generates():
    rng = np.random.default_rng(5)
    for verb in td.VERBS:
        for kind in ("box", "cylinder", "lamp_composite", "table_composite"):
            task, seq = feasible(rng, verb, kind)
            seq.validate_rotations()
            noun = td.OBJECT_NOUNS[kind]
            assert noun in seq.text
            skel = td.sequence_skeleton(seq)
            feet = forward_kinematics(seq, skel)[:, FOOT_JOINTS, 1]
            assert feet.min() > -0.01   # nothing sinks into the floor


def test_push_goes_off_the_ledge_and_lift_returns_to_floor():
    rng = np.random.default_rng(2)
    _, push = feasible(rng, "push", "box")
    _, lift = feasible(rng, "lift", "box")
    assert push.obj_transl[0, 1] == pytest.approx(td.LEDGE_HEIGHT, abs=1e-6)
    assert push.obj_transl[-1, 1] == pytest.approx(0.0, abs=1e-6)
    assert lift.obj_transl[-1, 1] == pytest.approx(lift.obj_transl[0, 1], abs=1e-6)
    # net vertical displacement (mean over frames of y_t - y_0) has opposite signs
    net = lambda s: float(np.mean(s.obj_transl[:, 1] - s.obj_transl[0, 1]))  # noqa: E731
    assert net(lift) > 0 > net(push)


def test_generation_deterministic():
    task = td.sample_task(np.random.default_rng(3), "pull", "box")
    a = td.generate_sequence(task, 2, 9)
    b = td.generate_sequence(task, 2, 9)
    from vihoi.motion import sequence_bytes
    assert sequence_bytes(a) == sequence_bytes(b)


def test_subject_scales():
    scales = [td.subject_scale(i) for i in range(10)]
    assert all(0.9 <= s <= 1.1 for s in scales)
    assert len(set(scales)) == 10


def test_infeasible_reach():
    task = td.ToyTask("lift", "box", (0.4, 0.3, 0.4), (0.0, 0.0, 1.9), (0.0, 0.0, 1.9), carry_height=1.5)
    with pytest.raises(InfeasibleTask):
        td.generate_sequence(task, 0, 0)


def _index(entries):
    return {"sequences": entries}


def test_make_split_by_subject_and_object():
    cfg = td.DatasetConfig()
    plan = td.plan_corpus(60, cfg, 0)
    entries = [{"id": f"s{i}", "subject": s, "object_kind": k} for i, (_, k, s) in enumerate(plan)]
    train, test = td.make_split(_index(entries), td.SplitSpec("by_subject", (8, 9)))
    by_id = {e["id"]: e for e in entries}
    assert all(by_id[i]["subject"] in (8, 9) for i in test)
    assert not set(train) & set(test) and set(train) | set(test) == set(by_id)
    train, test = td.make_split(entries, td.SplitSpec("by_object_category", ("cylinder",)))
    assert all(by_id[i]["object_kind"] != "cylinder" for i in train)
    assert all(by_id[i]["object_kind"] == "cylinder" for i in test)
    with pytest.raises(EmptySplit):
        td.make_split(entries, td.SplitSpec("by_subject", (42,)))
    with pytest.raises(ValueError):
        td.SplitSpec("by_subject", ())


def test_verb_histogram_balanced():
    plan = td.plan_corpus(500, td.DatasetConfig(), 7)
    counts = collections.Counter(v for v, _, _ in plan)
    assert set(counts) == set(td.VERBS)
    assert all(abs(c - 100) <= 10 for c in counts.values())


def test_build_corpus_deterministic(tmp_path):
    cfg = td.DatasetConfig(n_sequences=12)
    a = td.build_corpus(12, cfg, 5, tmp_path / "a")
    b = td.build_corpus(12, cfg, 5, tmp_path / "b")
    cmp = filecmp.dircmp(a, b)
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sid in (e["id"] for e in td.load_index(a)["sequences"]):
        assert (a / "sequences" / sid / "joint_rot6d.f32").read_bytes() == \
            (b / "sequences" / sid / "joint_rot6d.f32").read_bytes()
        seq = load_sequence(a / "sequences" / sid)
        seq.validate_rotations()
        assert seq.meta["split_tags"]["by_subject"] in ("train", "test")
    index = json.loads((a / "index.json").read_text())
    assert {"id", "subject", "object_kind", "verb", "split_tags"} <= set(index["sequences"][0])


def test_no_label_corpus(tmp_path):
    cfg = td.DatasetConfig(n_sequences=3, contact_labels=False)
    out = td.build_corpus(3, cfg, 1, tmp_path / "c")
    assert td.load_index(out)["has_contact_labels"] is False
    seq = load_sequence(out / "sequences" / "seq_0000")
    assert not seq.contact.any() and seq.meta["has_contact_labels"] is False
