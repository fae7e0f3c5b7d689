import itertools

import numpy as np
import pytest
import torch

from helpers import identity_sequence, random_sequence
from vihoi import evaluation as E
from vihoi import toy_dataset as td
from vihoi.errors import CorpusTooSmall, DegenerateCovariance, LengthMismatch, NotWatertight, TooFewPairs
from vihoi.geometry import ObjectMesh, make_primitive, make_sphere
from vihoi.motion import HAND_JOINTS, Skeleton, default_skeleton, forward_kinematics, matrix_to_rot6d


# ---------------------------------------------------------------- MPJPE

def test_mpjpe_identity_and_root_shift():
    skel = default_skeleton()
    seq = random_sequence(np.random.default_rng(0), 5)
    assert E.mpjpe(seq, seq, skel) == 0.0
    shifted = seq.copy(root_transl=seq.root_transl + [0.1, 0, 0])
    assert E.mpjpe(shifted, seq, skel) == pytest.approx(10.0, abs=1e-9)
    with pytest.raises(LengthMismatch):
        E.mpjpe(seq, random_sequence(np.random.default_rng(1), 4), skel)


def test_mpjpe_two_frame_hand_arithmetic():
    # 2-joint chain: root plus one child 1 m along +x; the child is rotated in frame 1 only
    skel = Skeleton((-1, 0), np.array([[0.0, 0, 0], [1.0, 0, 0]]))

    class Seq:
        def __init__(self, root, rot):
            self.root_transl, self.joint_rot6d, self.length = np.asarray(root, float), np.asarray(rot, float), 2

    ident = [1, 0, 0, 0, 1, 0]
    rz = matrix_to_rot6d(np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]]))
    gt = Seq([[0, 0, 0], [0, 0, 0]], [[ident, ident], [ident, ident]])
    # frame 0: root moved 0.03 m up -> both joints off by 3 cm
    # frame 1: root rotated 90 deg about z -> root 0 cm, child at (0,1,0) vs (1,0,0) -> sqrt(2) m
    pred = Seq([[0, 0.03, 0], [0, 0, 0]], [[ident, ident], [rz, ident]])
    expected = (3.0 + 3.0 + 0.0 + np.sqrt(2) * 100) / 4
    assert E.mpjpe(pred, gt, skel) == pytest.approx(expected, abs=1e-9)


# ---------------------------------------------------------------- contacts

def box_distance(p, dims):
    """Analytic distance from points (N, 3) to the surface of a box resting on y = 0."""
    w, h, d = dims
    q = np.abs(p - [0, h / 2, 0]) - [w / 2, h / 2, d / 2]
    outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
    inside = np.minimum(q.max(-1), 0)
    return outside + np.abs(inside)


def brute_scores(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        tp += p and g
        fp += p and not g
        fn += g and not p
    prec = tp / (tp + fp) if tp + fp else 1.0
    rec = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


def test_confusion_six_frame_table():
    gt = np.array([[1, 0], [1, 1], [1, 0], [0, 0], [1, 1], [0, 0]], bool)
    pred = np.array([[1, 1], [1, 1], [0, 0], [0, 1], [1, 1], [0, 0]], bool)
    # tp = 5, fp = 2, fn = 1
    prec, rec, f1 = E.confusion_scores(pred, gt)
    assert prec == 5 / 7 and rec == 5 / 6
    assert f1 == pytest.approx(2 * (5 / 7) * (5 / 6) / (5 / 7 + 5 / 6), abs=1e-15)
    assert E.confusion_scores(np.zeros(4, bool), np.zeros(4, bool)) == (1.0, 1.0, 1.0)
    assert E.confusion_scores(np.zeros(4, bool), np.ones(4, bool)) == (1.0, 0.0, 0.0)


def test_contact_metrics_match_brute_force_100_cases():
    rng = np.random.default_rng(0)
    skel = default_skeleton()
    for case in range(100):
        L = int(rng.integers(2, 12))
        seq = random_sequence(rng, L)
        seq = seq.copy(root_transl=rng.normal(0, 0.2, (L, 3)) + [0, 0.9, 0],
                       obj_rot6d=np.tile([1.0, 0, 0, 0, 1, 0], (L, 1)))
        dims = tuple(rng.uniform(0.2, 1.0, 3))
        wrists = forward_kinematics(seq, skel)[:, HAND_JOINTS]
        # put the box next to the wrists so both outcomes occur
        seq = seq.copy(obj_transl=wrists.mean(1) - [0, dims[1] / 2, 0] + rng.normal(0, 0.3, (L, 3)))
        thr = float(rng.uniform(0.02, 0.5))
        labels = rng.random((L, 2)) < 0.5
        mesh = make_primitive("box", dims)
        d = box_distance((wrists - seq.obj_transl[:, None]).reshape(-1, 3), dims).reshape(L, 2)
        assert not np.any(np.abs(d - thr) < 1e-9)
        pred = d <= thr
        prec, rec, f1, pct = E.contact_metrics(seq, labels, mesh, thr, skel)
        bp, br, bf = brute_scores(pred, labels)
        assert (prec, rec) == (bp, br)
        assert f1 == pytest.approx(bf, abs=1e-15)
        assert pct == pred.mean()


def test_contact_metrics_saturation_and_identity():
    task = td.sample_task(np.random.default_rng(4), "lift", "box")
    seq = td.generate_sequence(task, 0, 0)
    skel = td.sequence_skeleton(seq)
    assert E.contact_metrics(seq, seq.contact, task.mesh(), td.CONTACT_THRESHOLD, skel)[:3] == (1.0, 1.0, 1.0)
    prec, rec, f1, pct = E.contact_metrics(seq, seq.contact, task.mesh(), np.inf, skel)
    assert pct == 1.0 and rec == 1.0
    with pytest.raises(LengthMismatch):
        E.contact_metrics(seq, seq.contact[:-1], task.mesh())


# ---------------------------------------------------------------- foot sliding / penetration

def test_foot_sliding():
    skel = default_skeleton()
    seq = identity_sequence(5, root=(0, 0.93, 0))
    assert E.foot_sliding(seq, skel) == 0.0
    feet_y = forward_kinematics(seq, skel)[0, [10, 11], 1]
    ground = seq.copy(root_transl=np.array([[0.01 * f, 0.93 - feet_y.mean(), 0] for f in range(5)]))
    assert np.allclose(forward_kinematics(ground, skel)[:, [10, 11], 1], 0, atol=1e-3)
    # feet are not exactly level in the rest pose; weight each by its own height
    h = forward_kinematics(ground, skel)[0, [10, 11], 1]
    expected = np.mean(np.clip(1 - h / 0.05, 0, 1)) * 1.0
    assert E.foot_sliding(ground, skel) == pytest.approx(expected, abs=1e-9)
    high = ground.copy(root_transl=ground.root_transl + [0, 0.2, 0])
    assert E.foot_sliding(high, skel) == 0.0


def test_foot_sliding_flat_foot_oracle():
    # a skeleton whose feet sit exactly at the root height
    parent = tuple(default_skeleton().parent)
    offsets = np.zeros((22, 3))
    skel = Skeleton(parent, offsets)
    seq = identity_sequence(4, root=(0, 0, 0))
    seq = seq.copy(root_transl=np.array([[0.01 * f, 0, 0] for f in range(4)]))
    assert E.foot_sliding(seq, skel) == pytest.approx(1.0, abs=1e-12)


def sphere_case(L=8):
    """Both wrists inside a unit sphere (depth 0.5) for the first half of the frames, far outside after."""
    skel = default_skeleton()
    seq = identity_sequence(L, root=(0, 0.93, 0))
    wrists = forward_kinematics(seq, skel)[0, HAND_JOINTS]
    span = np.linalg.norm(wrists[0] - wrists[1]) / 2
    centre = wrists.mean(0)
    obj = np.tile(centre, (L, 1))
    obj[L // 2:] += [0, 0, 10.0]
    return seq.copy(obj_transl=obj), skel, span


def test_hand_penetration_sphere():
    seq, skel, span = sphere_case()
    sphere = make_sphere(1.0, 4)
    # analytic SDF of the wrists: |p - c| - 1 = span - 1 inside, ~9 outside
    analytic = np.array([[span - 1.0] * 2] * 4 + [[np.hypot(span, 10.0) - 1.0] * 2] * 4)
    expected = float((analytic < -0.005).mean())
    assert expected == 0.5
    assert abs(E.hand_penetration(seq, sphere, skel) - expected) < 1e-6
    assert E.hand_penetration(seq, sphere, skel, delta=np.inf) == 0.0
    far = seq.copy(obj_transl=seq.obj_transl + [0, 0, 20.0])
    assert E.hand_penetration(far, sphere, skel) == 0.0
    open_mesh = ObjectMesh(sphere.vertices, sphere.faces[:-1])
    with pytest.raises(NotWatertight):
        E.hand_penetration(seq, open_mesh, skel)


# ---------------------------------------------------------------- FID / diversity / R-precision

def test_fid_identity_and_closed_forms():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(500, 8))
    assert E.fid(a, a) < 1e-6
    for sa, sb in ((1.0, 4.0), (0.5, 2.0)):
        # exact diagonal covariances via whitened samples
        z = rng.normal(size=(4000, 6))
        z = (z - z.mean(0)) @ np.linalg.inv(np.linalg.cholesky(np.cov(z, rowvar=False))).T
        mu = np.array([1.0, -2, 0, 0, 0.5, 0])
        A, B = np.sqrt(sa) * z, np.sqrt(sb) * z + mu
        closed = 6 * (np.sqrt(sa) - np.sqrt(sb)) ** 2 + mu @ mu
        assert abs(E.fid(A, B) - closed) < 1e-6


def test_fid_gaussian_shift():
    rng = np.random.default_rng(1)
    mu = np.zeros(16)
    mu[:4] = 1.0    # |mu|^2 = 4
    a = rng.normal(size=(100_000, 16))
    b = rng.normal(size=(100_000, 16)) + mu
    assert abs(E.fid(a, b) - 4.0) < 0.1


def test_fid_small_samples_use_shrinkage():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(40, 64)), rng.normal(size=(40, 64))
    v = E.fid(a, b)
    assert np.isfinite(v) and v >= 0
    with pytest.raises(DegenerateCovariance):
        E.fid(a[:1], b)


def test_r_precision_calibration():
    rng = np.random.default_rng(0)
    t = rng.normal(size=(3200, 64))
    m = rng.normal(size=(3200, 64))
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    top = E.r_precision_embeddings(t, m, 32, seed=0)
    assert abs(top[0] - 1 / 32) < 0.02
    assert top[0] <= top[1] <= top[2]
    assert E.r_precision_embeddings(t, t, 32) == (1.0, 1.0, 1.0)
    with pytest.raises(TooFewPairs):
        E.r_precision_embeddings(t[:31], m[:31], 32)


def test_r_precision_rotation_invariance():
    rng = np.random.default_rng(3)
    t, m = rng.normal(size=(96, 16)), rng.normal(size=(96, 16))
    m = t + 0.8 * m
    q, _ = np.linalg.qr(rng.normal(size=(16, 16)))
    assert E.r_precision_embeddings(t, m, 32, 1) == pytest.approx(E.r_precision_embeddings(t @ q, m @ q, 32, 1))


def test_diversity():
    rng = np.random.default_rng(0)
    assert E.diversity(np.ones((50, 8))) == 0.0
    x = np.zeros((1000, 4))
    x[500:, 0] = 3.0
    vals = [E.diversity(x, 300, s) for s in range(20)]
    assert abs(np.mean(vals) - 1.5) < 0.05 * 1.5
    f = rng.normal(size=(100, 8))
    assert E.diversity(f, 30, 7) == E.diversity(f, 30, 7)
    assert E.diversity(f[:3], 300, 0) > 0   # pairs capped at n // 2
    with pytest.raises(ValueError):
        E.diversity(f[:1])


# ---------------------------------------------------------------- evaluator

def toy_sequences(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        verb = td.VERBS[i % 5]
        kind = ("box", "cylinder", "lamp_composite", "table_composite")[(i // 5) % 4]
        for k in range(50):
            try:
                out.append(td.generate_sequence(td.sample_task(rng, verb, kind), i % 10, 100 * i + k))
                break
            except td.InfeasibleTask:
                continue
    return out


@pytest.fixture(scope="module")
def pairs200():
    return toy_sequences(200)


SMALL_EVAL = dict(dim=128, hidden=64, epochs=25, batch=32, lr=2e-3)


def test_untrained_evaluator_is_at_chance(pairs200):
    model = E.EvaluatorModel(dim=128, hidden=64, seed=0)
    top = E.r_precision(model, [(s.text, s) for s in pairs200], 32, seed=0)
    assert abs(top[0] - 1 / 32) <= 0.06


def test_evaluator_separates_matched_pairs(pairs200):
    model, history = E.train_evaluator(pairs200, SMALL_EVAL, seed=0)
    assert history[-1] < history[0]
    m = model.embed_motions(pairs200)
    t = model.embed_texts([s.text for s in pairs200])
    np.testing.assert_allclose(np.linalg.norm(m, axis=1), 1, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(t, axis=1), 1, atol=1e-6)
    sim = t @ m.T
    texts = np.array([s.text for s in pairs200])
    matched = np.diag(sim)
    unmatched = sim[texts[:, None] != texts[None, :]]
    assert np.median(matched) > np.median(unmatched)


def test_frozen_text_head_variant(pairs200):
    model, _ = E.train_evaluator(pairs200[:40], dict(SMALL_EVAL, text_encoder="frozen", epochs=2), seed=0)
    assert all(not p.requires_grad for p in model._frozen.parameters())
    t = model.embed_texts(["Lift the box, and set it back down."])
    assert t.shape == (1, 128)


def test_corpus_too_small(pairs200):
    with pytest.raises(CorpusTooSmall):
        E.train_evaluator(pairs200[:31], SMALL_EVAL)


def test_evaluator_round_trip(pairs200, tmp_path):
    model = E.EvaluatorModel(dim=128, hidden=64, seed=3)
    model.save(tmp_path / "ev.zip", {"note": "x"})
    back = E.EvaluatorModel.load(tmp_path / "ev.zip")
    np.testing.assert_array_equal(model.embed_motions(pairs200[:4]), back.embed_motions(pairs200[:4]))
    assert back.manifest["note"] == "x"


def test_contrastive_loss_ignores_same_text_negatives():
    m = torch.tensor([[1.0, 0], [0, 1.0]])
    t = torch.tensor([[0, 1.0], [1.0, 0]])  # each text sits on the other motion
    assert E.contrastive_loss(m, t, ["a", "a"]).item() == 0.0
    assert E.contrastive_loss(m, t, ["a", "b"]).item() > 0


# ---------------------------------------------------------------- reports

def scored(seqs, evaluator, seed=0):
    return E.score_sequences(seqs, seqs, evaluator, None, seed)


def test_gt_as_prediction_report(pairs200, tmp_path):
    gts = [s.copy() for s in pairs200[:40]]
    for s, g in zip(pairs200[:40], gts):
        g.meta = dict(s.meta)
    model = E.EvaluatorModel(dim=128, hidden=64, seed=0)
    rep, meta = scored(gts, model)
    assert rep.mpjpe == 0 and rep.c_f1 == 1 and rep.fid < 0.05
    for v in (rep.top1, rep.top2, rep.top3, rep.c_prec, rep.c_rec, rep.c_f1, rep.c_pct, rep.p_hand):
        assert 0 <= v <= 1
    again, _ = scored(gts, model)
    assert again == rep
    js, csv_path = E.write_report(tmp_path, rep, meta)
    doc = E.validate_report(js)
    assert doc["columns"] == list(E.COLUMNS)
    header, row = csv_path.read_text().splitlines()
    assert header.split(",") == list(E.COLUMNS) and len(row.split(",")) == 12
    assert E.is_finite_report(rep)
    with pytest.raises(TooFewPairs):
        scored(gts[:2], model)


def test_unlabelled_corpus_reports_null_contacts(pairs200):
    gts = []
    for s in pairs200[:5]:
        g = s.copy(contact=np.zeros_like(s.contact))
        g.meta = dict(s.meta, has_contact_labels=False)
        gts.append(g)
    rep, meta = scored(gts, E.EvaluatorModel(dim=128, hidden=64))
    assert rep.c_prec is None and rep.c_f1 is None and rep.c_pct is not None
    assert meta["contact_labels"] is False
    E.report_document(rep, meta)
