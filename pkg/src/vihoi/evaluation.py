"""Motion metrics and the contrastive text/motion evaluator behind FID, R-precision and diversity."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import jsonschema
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.covariance import ledoit_wolf

from . import geometry, toy_dataset
from .archive import read_archive, write_archive
from .encoder import ToyTextEncoder
from .errors import CorpusTooSmall, DegenerateCovariance, LengthMismatch, TooFewPairs
from .motion import (EVAL_DIM, FOOT_JOINTS, MotionSequence, Skeleton, forward_kinematics,
                     to_eval_representation)
from .priors import default_tokenizer

EVALUATOR_SCHEMA = "vihoi.evaluator/1"
REPORT_SCHEMA = "vihoi.report/1"
COLUMNS = ("R-prec Top1", "R-prec Top2", "R-prec Top3", "FID", "Diversity", "FS",
           "C_prec", "C_rec", "C_F1", "C_%", "P_hand", "MPJPE")
_FIELDS = ("top1", "top2", "top3", "fid", "diversity", "fs", "c_prec", "c_rec", "c_f1", "c_pct",
           "p_hand", "mpjpe")


# ---------------------------------------------------------------- pose metrics

def mpjpe(pred: MotionSequence, gt: MotionSequence, skel: Skeleton) -> float:
    """Mean per-joint position error in centimetres."""
    if pred.length != gt.length:
        raise LengthMismatch(f"pred has {pred.length} frames, gt {gt.length}")
    d = np.linalg.norm(forward_kinematics(pred, skel) - forward_kinematics(gt, skel), axis=-1)
    return float(d.mean() * 100.0)


def _ratio(num, den, empty):
    return float(num / den) if den else float(empty)


def confusion_scores(pred, gt):
    """(prec, rec, f1) for boolean arrays; prec=1 with no predictions, rec=1 with no positives."""
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    tp = int((pred & gt).sum())
    prec = _ratio(tp, int(pred.sum()), 1.0)
    rec = _ratio(tp, int(gt.sum()), 1.0)
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return prec, rec, f1


def predicted_contacts(seq: MotionSequence, mesh: geometry.ObjectMesh, skel: Skeleton,
                       threshold: float = toy_dataset.CONTACT_THRESHOLD) -> np.ndarray:
    return toy_dataset.hand_object_distances(seq, mesh, skel) <= threshold


def contact_metrics(pred: MotionSequence, gt_labels, mesh: geometry.ObjectMesh,
                    threshold: float = toy_dataset.CONTACT_THRESHOLD, skel: Skeleton | None = None):
    """(precision, recall, F1, predicted-contact fraction) over all (frame, hand) pairs."""
    gt_labels = np.asarray(gt_labels, bool)
    if gt_labels.shape != (pred.length, 2):
        raise LengthMismatch(f"labels {gt_labels.shape} vs sequence length {pred.length}")
    skel = skel or toy_dataset.sequence_skeleton(pred)
    contact = predicted_contacts(pred, mesh, skel, threshold)
    prec, rec, f1 = confusion_scores(contact, gt_labels)
    return prec, rec, f1, float(contact.mean())


def foot_sliding(seq: MotionSequence, skel: Skeleton, h_max: float = 0.05) -> float:
    """Height-weighted horizontal foot speed in cm/frame, averaged over transitions and both feet.

    Each transition f -> f+1 uses the mean foot height of its two frames for the weight.
    """
    feet = forward_kinematics(seq, skel)[:, FOOT_JOINTS]  # (L, 2, 3)
    step = np.linalg.norm(np.diff(feet[:, :, [0, 2]], axis=0), axis=-1)
    h = 0.5 * (feet[1:, :, 1] + feet[:-1, :, 1])
    w = np.clip(1.0 - h / h_max, 0.0, 1.0)
    return float((w * step).mean() * 100.0)


def hand_penetration(seq: MotionSequence, mesh: geometry.ObjectMesh, skel: Skeleton | None = None,
                     delta: float = 0.005) -> float:
    """Fraction of (frame, hand) pairs deeper than delta inside the posed object."""
    skel = skel or toy_dataset.sequence_skeleton(seq)
    sd = toy_dataset.hand_object_distances(seq, mesh, skel, signed=True)
    return float((sd < -delta).mean())


# ---------------------------------------------------------------- feature statistics

def _covariance(x: np.ndarray) -> np.ndarray:
    n, d = x.shape
    if n < 2:
        raise DegenerateCovariance("need at least 2 samples for a covariance")
    if n < 2 * d:
        cov, _ = ledoit_wolf(x)
    else:
        cov = np.cov(x, rowvar=False)
    cov = np.atleast_2d(cov)
    if not np.all(np.isfinite(cov)):
        raise DegenerateCovariance("covariance has non-finite entries")
    return cov


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min() < -1e-8 * max(1.0, abs(w).max()):
        raise DegenerateCovariance("covariance is not positive semi-definite")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(features_a, features_b) -> float:
    """Frechet distance between Gaussian fits; shrinkage covariance below 2 x dim samples."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be 2-D with equal width")
    ca, cb = _covariance(a), _covariance(b)
    sa = _sqrt_psd(ca)
    cross = np.linalg.eigvalsh(sa @ cb @ sa)
    if cross.min() < -1e-8 * max(1.0, abs(cross).max()):
        raise DegenerateCovariance("covariance product is not positive semi-definite")
    tr_cross = np.sqrt(np.clip(cross, 0, None)).sum()
    diff = a.mean(0) - b.mean(0)
    return float(max(diff @ diff + np.trace(ca) + np.trace(cb) - 2 * tr_cross, 0.0))


def r_precision_embeddings(text_emb, motion_emb, batch: int = 32, seed: int = 0, top: int = 3):
    """Top-1..top fractions; pair i is (text_emb[i], motion_emb[i]).

    Pairs are shuffled per seed and cut into full batches; within a batch every
    text ranks all motions by Euclidean distance. Ties go in favour of the true
    motion (rank = 1 + number of strictly closer motions).
    """
    t = np.asarray(text_emb, dtype=np.float64)
    m = np.asarray(motion_emb, dtype=np.float64)
    n = len(t)
    if n < batch or batch < top:
        raise TooFewPairs(f"need at least {max(batch, top)} pairs, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    hits = np.zeros(top)
    n_batches = n // batch
    for b in range(n_batches):
        idx = order[b * batch:(b + 1) * batch]
        d = np.linalg.norm(t[idx, None, :] - m[None, idx, :], axis=-1)
        rank = 1 + (d < np.diag(d)[:, None]).sum(1)
        hits += [(rank <= k).mean() for k in range(1, top + 1)]
    return tuple(float(h / n_batches) for h in hits)


def diversity(features, pairs: int = 300, seed: int = 0) -> float:
    """Mean distance over disjoint random index pairs (at most n // 2 of them)."""
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ValueError("diversity needs at least 2 samples")
    k = min(pairs, n // 2)
    perm = np.random.default_rng(seed).permutation(n)[:2 * k]
    return float(np.linalg.norm(x[perm[:k]] - x[perm[k:]], axis=-1).mean())


# ---------------------------------------------------------------- evaluator

class MotionEncoder(nn.Module):
    def __init__(self, hidden=256, out=512):
        super().__init__()
        self.inp = nn.Linear(EVAL_DIM, hidden)
        self.gru = nn.GRU(hidden, hidden, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * hidden, out)

    def forward(self, x, lengths):
        h = F.leaky_relu(self.inp(x), 0.2)
        packed = nn.utils.rnn.pack_padded_sequence(h, lengths.cpu(), batch_first=True, enforce_sorted=False)
        y, _ = self.gru(packed)
        y, _ = nn.utils.rnn.pad_packed_sequence(y, batch_first=True, total_length=x.shape[1])
        mask = (torch.arange(x.shape[1])[None] < lengths[:, None]).to(y.dtype)[..., None]
        pooled = (y * mask).sum(1) / lengths[:, None].to(y.dtype)
        return F.normalize(self.out(pooled), dim=-1)


class TextEncoder(nn.Module):
    """Toy trainable text tower: embeddings + BiGRU, masked mean."""

    def __init__(self, vocab=2048, embed=128, hidden=256, out=512):
        super().__init__()
        self.embed = nn.Embedding(vocab, embed, padding_idx=0)
        self.gru = nn.GRU(embed, hidden, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * hidden, out)

    def forward(self, ids, lengths):
        packed = nn.utils.rnn.pack_padded_sequence(self.embed(ids), lengths.cpu(), batch_first=True,
                                                   enforce_sorted=False)
        y, _ = self.gru(packed)
        y, _ = nn.utils.rnn.pad_packed_sequence(y, batch_first=True, total_length=ids.shape[1])
        mask = (torch.arange(ids.shape[1])[None] < lengths[:, None]).to(y.dtype)[..., None]
        return F.normalize(self.out((y * mask).sum(1) / lengths[:, None].to(y.dtype)), dim=-1)


class FrozenTextHead(nn.Module):
    """Frozen pretrained-style text encoder (mean of its states) + trainable projection."""

    def __init__(self, hidden=256, out=512):
        super().__init__()
        self.head = nn.Sequential(nn.Linear(256, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, out))

    def forward(self, pooled):
        return F.normalize(self.head(pooled), dim=-1)


class EvaluatorModel(nn.Module):
    def __init__(self, text_encoder: str = "toy", dim: int = 512, hidden: int = 256, seed: int = 0):
        super().__init__()
        if text_encoder not in ("toy", "frozen"):
            raise ValueError(f"unknown evaluator text encoder {text_encoder!r}")
        self.text_mode, self.dim, self.hidden = text_encoder, dim, hidden
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.motion = MotionEncoder(hidden, dim)
            self.text = TextEncoder(hidden=hidden, out=dim) if text_encoder == "toy" else FrozenTextHead(hidden, dim)
        self.register_buffer("mean", torch.zeros(EVAL_DIM))
        self.register_buffer("std", torch.ones(EVAL_DIM))
        self.tokenizer = default_tokenizer()
        self._frozen = ToyTextEncoder() if text_encoder == "frozen" else None

    # inputs -------------------------------------------------------------
    def motion_batch(self, seqs):
        evs = [to_eval_representation(s) for s in seqs]
        L = max(len(e) for e in evs)
        x = np.zeros((len(evs), L, EVAL_DIM), dtype=np.float32)
        for i, e in enumerate(evs):
            x[i, :len(e)] = e
        x = (torch.from_numpy(x) - self.mean) / self.std
        return x, torch.tensor([len(e) for e in evs])

    def text_batch(self, texts):
        if self._frozen is not None:
            return (torch.from_numpy(np.stack([self._frozen.encode_ids(self.tokenizer.encode(t)[0]).mean(0)
                                               for t in texts])),)
        ids = [self.tokenizer.encode(t)[0] or [1] for t in texts]
        L = max(len(i) for i in ids)
        arr = np.zeros((len(ids), L), dtype=np.int64)
        for k, i in enumerate(ids):
            arr[k, :len(i)] = i
        return torch.from_numpy(arr), torch.tensor([len(i) for i in ids])

    def encode_motion_inputs(self, x, lengths):
        x = x.clone()
        x[torch.arange(x.shape[1])[None] >= lengths[:, None]] = 0.0
        return self.motion(x, lengths)

    # public -------------------------------------------------------------
    @torch.no_grad()
    def embed_motions(self, seqs, chunk: int = 64) -> np.ndarray:
        self.eval()
        out = [self.encode_motion_inputs(*self.motion_batch(seqs[i:i + chunk]))
               for i in range(0, len(seqs), chunk)]
        return torch.cat(out).double().numpy()

    @torch.no_grad()
    def embed_texts(self, texts, chunk: int = 64) -> np.ndarray:
        self.eval()
        out = [self.text(*self.text_batch(list(texts[i:i + chunk]))) for i in range(0, len(texts), chunk)]
        return torch.cat(out).double().numpy()

    def save(self, path, manifest: dict | None = None):
        tensors = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        meta = dict(manifest or {}, text_encoder=self.text_mode, dim=self.dim, hidden=self.hidden)
        return write_archive(path, meta, tensors, EVALUATOR_SCHEMA)

    @classmethod
    def load(cls, path) -> "EvaluatorModel":
        manifest, tensors = read_archive(path, EVALUATOR_SCHEMA)
        model = cls(manifest["text_encoder"], manifest["dim"], manifest["hidden"])
        model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        model.manifest = manifest
        return model.eval()


def contrastive_loss(m, t, texts, margin: float = 0.2):
    """Hinge on Euclidean distances: each matched pair must beat every in-batch negative by `margin`.

    Negatives sharing the same annotation are not penalised.
    """
    d = torch.cdist(m, t)  # d[i, j] = |m_i - t_j|
    pos = torch.diagonal(d)
    same = torch.tensor([[a == b for b in texts] for a in texts])
    neg_mask = (~same).to(d.dtype)
    l_text = F.relu(margin + pos[None, :] - d) * neg_mask       # motion j vs text j's true motion
    l_motion = F.relu(margin + pos[:, None] - d) * neg_mask     # text j vs motion i's true text
    denom = neg_mask.sum().clamp_min(1.0)
    return (l_text.sum() + l_motion.sum()) / (2 * denom)


def train_evaluator(sequences, cfg: dict | None = None, seed: int = 0, progress=None):
    """Fit the evaluator on (annotation, motion) pairs; returns (model, history)."""
    cfg = {**dict(text_encoder="toy", dim=512, hidden=256, epochs=60, batch=32, lr=1e-3, margin=0.2), **(cfg or {})}
    seqs = list(sequences)
    if len(seqs) < 32:
        raise CorpusTooSmall(f"evaluator needs at least 32 pairs, got {len(seqs)}")
    model = EvaluatorModel(cfg["text_encoder"], cfg["dim"], cfg["hidden"], seed)
    frames = np.concatenate([to_eval_representation(s) for s in seqs])
    model.mean.copy_(torch.from_numpy(frames.mean(0)).float())
    model.std.copy_(torch.from_numpy(np.maximum(frames.std(0), 0.05)).float())
    texts = [s.text for s in seqs]
    x_all, len_all = model.motion_batch(seqs)
    t_all = model.text_batch(texts)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg["lr"])
    history = []
    model.train()
    for epoch in range(cfg["epochs"]):
        order = np.random.default_rng([seed, epoch]).permutation(len(seqs))
        tot, nb = 0.0, 0
        for s in range(0, len(order), cfg["batch"]):
            idx = order[s:s + cfg["batch"]]
            if len(idx) < 2:
                continue
            ti = torch.from_numpy(idx)
            m = model.encode_motion_inputs(x_all[ti], len_all[ti])
            t = model.text(*[a[ti] for a in t_all])
            loss = contrastive_loss(m, t, [texts[i] for i in idx], cfg["margin"])
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item()
            nb += 1
        history.append(tot / max(nb, 1))
        if progress:
            progress(epoch, history[-1])
    return model.eval(), history


def r_precision(model: EvaluatorModel, pairs, batch: int = 32, seed: int = 0):
    """pairs: [(text, MotionSequence)]."""
    texts = [p[0] for p in pairs]
    return r_precision_embeddings(model.embed_texts(texts), model.embed_motions([p[1] for p in pairs]),
                                  batch, seed)


# ---------------------------------------------------------------- report

@dataclass
class MetricReport:
    top1: float
    top2: float
    top3: float
    fid: float
    diversity: float
    fs: float
    c_prec: float | None
    c_rec: float | None
    c_f1: float | None
    c_pct: float
    p_hand: float
    mpjpe: float

    def row(self):
        return [getattr(self, f) for f in _FIELDS]

    def to_dict(self):
        return asdict(self)


_NUM = {"type": "number"}
_FRAC = {"type": "number", "minimum": 0, "maximum": 1}
_FRAC_OR_NULL = {"type": ["number", "null"], "minimum": 0, "maximum": 1}
REPORT_JSON_SCHEMA = {
    "type": "object",
    "required": ["schema", "columns", "metrics", "meta"],
    "properties": {
        "schema": {"const": REPORT_SCHEMA},
        "columns": {"const": list(COLUMNS)},
        "metrics": {
            "type": "object",
            "required": list(_FIELDS),
            "additionalProperties": False,
            "properties": {
                "top1": _FRAC, "top2": _FRAC, "top3": _FRAC,
                "fid": {"type": "number", "minimum": 0}, "diversity": {"type": "number", "minimum": 0},
                "fs": {"type": "number", "minimum": 0},
                "c_prec": _FRAC_OR_NULL, "c_rec": _FRAC_OR_NULL, "c_f1": _FRAC_OR_NULL,
                "c_pct": _FRAC, "p_hand": _FRAC, "mpjpe": {"type": "number", "minimum": 0},
            },
        },
        "meta": {"type": "object", "required": ["n_items", "rprec_batch", "evaluator_text_encoder", "seed"]},
    },
}


def score_sequences(preds, gts, evaluator: EvaluatorModel, metrics_cfg: dict | None = None, seed: int = 0):
    """Compute every metric for generated `preds` against ground truth `gts` (same order)."""
    mc = {**dict(contact_threshold=0.05, penetration_delta=0.005, fs_height=0.05, diversity_pairs=300,
                 rprec_batch=32), **(metrics_cfg or {})}
    n = len(preds)
    if n != len(gts):
        raise LengthMismatch("predictions and ground truth differ in count")
    if n < 3:
        raise TooFewPairs(f"need at least 3 items to evaluate, got {n}")
    per = {k: [] for k in ("fs", "c_prec", "c_rec", "c_f1", "c_pct", "p_hand", "mpjpe")}
    labelled = all(g.meta.get("has_contact_labels", True) for g in gts)
    for p, g in zip(preds, gts):
        skel = toy_dataset.sequence_skeleton(g)
        mesh = toy_dataset.sequence_mesh(g)
        prec, rec, f1, pct = contact_metrics(p, g.contact, mesh, mc["contact_threshold"], skel)
        per["c_prec"].append(prec)
        per["c_rec"].append(rec)
        per["c_f1"].append(f1)
        per["c_pct"].append(pct)
        per["fs"].append(foot_sliding(p, skel, mc["fs_height"]))
        per["p_hand"].append(hand_penetration(p, mesh, skel, mc["penetration_delta"]))
        per["mpjpe"].append(mpjpe(p, g, skel))
    texts = [g.text for g in gts]
    gen_feat = evaluator.embed_motions(preds)
    gt_feat = evaluator.embed_motions(gts)
    batch = min(mc["rprec_batch"], n)
    top = r_precision_embeddings(evaluator.embed_texts(texts), gen_feat, batch, seed)
    mean = {k: float(np.mean(v)) for k, v in per.items()}
    if not labelled:
        mean["c_prec"] = mean["c_rec"] = mean["c_f1"] = None
    report = MetricReport(top[0], top[1], top[2], fid(gen_feat, gt_feat),
                          diversity(gen_feat, mc["diversity_pairs"], seed), **mean)
    return report, {"n_items": n, "rprec_batch": batch, "evaluator_text_encoder": evaluator.text_mode,
                    "seed": seed, "contact_labels": labelled}


def report_document(report: MetricReport, meta: dict) -> dict:
    doc = {"schema": REPORT_SCHEMA, "columns": list(COLUMNS), "metrics": report.to_dict(), "meta": meta}
    jsonschema.validate(doc, REPORT_JSON_SCHEMA)
    return doc


def report_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    w.writerow(["" if v is None else f"{v:.6f}" for v in report.row()])
    return buf.getvalue()


def write_report(out_dir, report: MetricReport, meta: dict):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = report_document(report, meta)
    for name, text in (("report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n"),
                       ("report.csv", report_csv(report))):
        tmp = out_dir / (name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, out_dir / name)
    return out_dir / "report.json", out_dir / "report.csv"


def validate_report(path) -> dict:
    doc = json.loads(Path(path).read_text())
    jsonschema.validate(doc, REPORT_JSON_SCHEMA)
    return doc


def evaluate(checkpoint, data_dir, test_ids, evaluator: EvaluatorModel, cfg: dict, seed: int = 0,
             out_dir=None, extractor=None, source: str | None = None, predictions=None):
    """Sample one generation per test item (seeded per item), score it, optionally write the report.

    `predictions` (sid -> MotionSequence) bypasses sampling, e.g. to score ground truth.
    """
    from . import corpus, pipeline
    from .generator import build_extractor, load_generator

    gts = [corpus.load_item(data_dir, sid) for sid in test_ids]
    meta = {"source": None, "checkpoint": None}
    if predictions is None:
        gen = load_generator(checkpoint)
        extractor = extractor or build_extractor(gen.cfg)
        source = source or cfg["t2i"]["mode"]
        reqs = pipeline.requests_for(data_dir, test_ids, source, cfg, seed)
        preds = pipeline.run_requests(gen, extractor, reqs, cfg["diffusion"]["sample_steps"])
        meta = {"source": source, "checkpoint": str(checkpoint), "extraction": extractor.label()}
    else:
        preds = [predictions[sid] for sid in test_ids]
    report, m = score_sequences(preds, gts, evaluator, cfg["metrics"], seed)
    m.update(meta)
    if out_dir is not None:
        write_report(out_dir, report, m)
    return report, m, preds


def is_finite_report(report: MetricReport) -> bool:
    return all(v is None or math.isfinite(v) for v in report.row())
