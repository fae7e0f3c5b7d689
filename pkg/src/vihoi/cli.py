"""`vihoi` command line: gen-data, train-evaluator, train, sample, evaluate, render, ablate, serve-encoder, mesh."""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import os
import shutil
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__, config, corpus, evaluation, generator, geometry, pipeline, render, toy_dataset
from .errors import ConfigError, FrozenViolation, VihoiError
from .motion import load_sequence, save_sequence

RUN_SCHEMA = "vihoi.run/1"


class CommandError(VihoiError):
    pass


# ---------------------------------------------------------------- helpers

def _camera(cfg) -> render.Camera:
    r = cfg["render"]
    cam = render.Camera(eye=tuple(r["eye"]), look_at=tuple(r["look_at"]), ortho_scale=r["ortho_scale"],
                        resolution=(r["resolution"], r["resolution"]))
    cam.validate()
    return cam


def _dataset_config(cfg) -> toy_dataset.DatasetConfig:
    d = cfg["dataset"]
    return toy_dataset.DatasetConfig(n_sequences=d["n_sequences"], n_subjects=d["n_subjects"], frames=d["frames"],
                                     fps=d["fps"], held_out_subjects=tuple(d["held_out_subjects"]),
                                     held_out_objects=tuple(d["held_out_objects"]),
                                     contact_labels=d["contact_labels"])


def _path(args, cfg, name):
    v = getattr(args, name, None)
    return Path(v) if v else Path(cfg["paths"][name])


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run(out_dir, command: str, cfg: dict, seed: int, t0: float, **extra) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"schema": RUN_SCHEMA, "command": command, "version": __version__, "seed": seed, "config": cfg,
           "argv": sys.argv[1:], "wall_time": round(time.time() - t0, 3), **extra}
    tmp = out_dir / "run.json.tmp"
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    os.replace(tmp, out_dir / "run.json")
    return out_dir / "run.json"


def _warmup_data(cfg, data_dir, ids):
    if cfg["encoder"]["warmup_epochs"] <= 0:
        return None
    imgs, caps = [], []
    for sid in ids:
        seq = corpus.load_item(data_dir, sid)
        for im in corpus.load_keyframes(data_dir, sid, cfg["encoder"]["image_size"]):
            imgs.append(im)
            caps.append(seq.text)
    return np.stack(imgs), caps


def extractor_for(cfg, data_dir):
    """Frozen prior extractor; an optional warm-up uses the training split only, so it is reproducible."""
    warm = None
    if cfg["encoder"]["warmup_epochs"] > 0:
        warm = _warmup_data(cfg, data_dir, generator.split_ids(data_dir, cfg)[0])
    return generator.build_extractor(cfg, warm)


def _check_extractor(gen, extractor):
    want = gen.manifest.get("extractor_checksum")
    if want and want != extractor.checksum():
        raise FrozenViolation("prior extractor differs from the one the checkpoint was trained with")


def _resolve_ids(args, data_dir, cfg, default_split="test"):
    if getattr(args, "ids", None):
        return list(args.ids)
    train_ids, test_ids = generator.split_ids(data_dir, cfg)
    ids = {"train": train_ids, "test": test_ids, "all": train_ids + test_ids}[getattr(args, "split", None)
                                                                             or default_split]
    if getattr(args, "limit", None):
        ids = ids[: args.limit]
    return ids


def _require(path: Path, what: str):
    if not path.exists():
        raise CommandError(f"{what} not found at {path}")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg, seed):
    t0 = time.time()
    out = _path(args, cfg, "data")
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise CommandError(f"{out} already exists; pass --force to regenerate")
        shutil.rmtree(out)
    dcfg = _dataset_config(cfg)
    n = args.n or dcfg.n_sequences
    toy_dataset.build_corpus(n, dcfg, seed, out)
    cam = _camera(cfg)
    index = toy_dataset.load_index(out)
    for entry in index["sequences"]:
        sid = entry["id"]
        seq = corpus.load_item(out, sid)
        kf, imgs = render.render_keyframes(seq, toy_dataset.sequence_mesh(seq), cam,
                                           toy_dataset.sequence_skeleton(seq))
        corpus.write_keyframes(out, sid, imgs, kf.indices)
    write_run(out, "gen-data", cfg, seed, t0, n_sequences=n)
    corpus.write_manifest(out, {"n_sequences": n, "seed": seed, "dataset": cfg["dataset"], "render": cfg["render"]})
    print(f"wrote {n} sequences with keyframes to {out}")
    return 0


def cmd_train_evaluator(args, cfg, seed):
    t0 = time.time()
    data = _path(args, cfg, "data")
    out = _path(args, cfg, "evaluator")
    _require(data / "manifest.json", "complete corpus")
    ids = _resolve_ids(args, data, cfg, "train")
    seqs = [corpus.load_item(data, sid) for sid in ids]
    model, hist = evaluation.train_evaluator(seqs, cfg["evaluator"], seed,
                                             progress=lambda e, l: e % 10 == 0 and print(f"epoch {e} loss {l:.4f}"))
    path = model.save(out / "evaluator.zip", {"seed": seed, "train_ids": ids, "losses": hist})
    write_run(out, "train-evaluator", cfg, seed, t0, train_ids=ids, final_loss=hist[-1], evaluator_sha256=_file_sha(path))
    print(f"evaluator saved to {path}")
    return 0


def cmd_train(args, cfg, seed):
    t0 = time.time()
    data = _path(args, cfg, "data")
    out = _path(args, cfg, "model")
    _require(data / "manifest.json", "complete corpus")
    ids = _resolve_ids(args, data, cfg, "train")
    extractor = extractor_for(cfg, data)
    res = generator.train(data, cfg, seed, out / "checkpoint.zip", ids=ids, extractor=extractor,
                          resume=args.resume, steps=args.steps,
                          progress=lambda s, l: print(f"step {s} loss {l:.5f}", flush=True))
    write_run(out, "train", cfg, seed, t0, train_ids=ids, extractor_checksum=res.extractor_checksum,
              loss_first=res.losses[0], loss_last=res.losses[-1], checkpoint_sha256=_file_sha(res.checkpoint),
              resumed_from=str(args.resume) if args.resume else None)
    print(f"checkpoint saved to {res.checkpoint}")
    return 0


def _load_generator(args, cfg):
    ck = Path(args.checkpoint) if args.checkpoint else _path(args, cfg, "model") / "checkpoint.zip"
    _require(ck, "generator checkpoint")
    return ck, generator.load_generator(ck)


def cmd_sample(args, cfg, seed):
    t0 = time.time()
    data = _path(args, cfg, "data")
    out = _path(args, cfg, "samples")
    ck, gen = _load_generator(args, cfg)
    extractor = extractor_for(gen.cfg, data)
    _check_extractor(gen, extractor)
    ids = _resolve_ids(args, data, cfg)
    source = args.reference or cfg["t2i"]["mode"]
    texts = dict(zip(ids, [args.text] * len(ids))) if args.text else None
    reqs = pipeline.requests_for(data, ids, source, cfg, seed, texts)
    seqs = pipeline.run_requests(gen, extractor, reqs, cfg["diffusion"]["sample_steps"])
    digests = {}
    for r, seq in zip(reqs, seqs):
        d = save_sequence(seq, out / r.sid, dict(seq.meta, sample_seed=r.seed))
        if args.save_references:
            for i, im in enumerate(r.images):
                (d / f"reference_{i}.png").write_bytes(render.array_to_png(im))
        digests[r.sid] = hashlib.sha256(
            b"".join(p.read_bytes() for p in sorted(d.iterdir()) if p.suffix != ".png")).hexdigest()
    write_run(out, "sample", cfg, seed, t0, checkpoint=str(ck), reference_source=source, ids=ids,
              sample_seeds={r.sid: r.seed for r in reqs}, digests=digests)
    print(f"wrote {len(seqs)} samples to {out}")
    return 0


def cmd_evaluate(args, cfg, seed):
    t0 = time.time()
    data = _path(args, cfg, "data")
    out = _path(args, cfg, "report")
    ev_path = Path(args.evaluator) if args.evaluator else _path(args, cfg, "evaluator") / "evaluator.zip"
    _require(ev_path, "evaluator")
    evaluator = evaluation.EvaluatorModel.load(ev_path)
    ids = _resolve_ids(args, data, cfg)
    preds, ck, extractor = None, None, None
    if args.samples:
        preds = {sid: load_sequence(Path(args.samples) / sid) for sid in ids}
    elif args.ground_truth:
        preds = {sid: corpus.load_item(data, sid) for sid in ids}
    else:
        ck, gen = _load_generator(args, cfg)
        extractor = extractor_for(gen.cfg, data)
        _check_extractor(gen, extractor)
    report, meta, _ = evaluation.evaluate(ck, data, ids, evaluator, cfg, seed, None, extractor,
                                          args.reference, preds)
    if args.samples:
        meta["samples"] = str(args.samples)
    evaluation.write_report(out, report, meta)
    write_run(out, "evaluate", cfg, seed, t0, ids=ids, evaluator=str(ev_path),
              report_sha256=_file_sha(out / "report.json"))
    print(evaluation.report_csv(report), end="")
    return 0


def cmd_render(args, cfg, seed):
    t0 = time.time()
    data = _path(args, cfg, "data")
    out = _path(args, cfg, "renders")
    cam = _camera(cfg)
    ids = _resolve_ids(args, data, cfg, "all")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for sid in ids:
        seq = load_sequence(Path(args.samples) / sid) if args.samples else corpus.load_item(data, sid)
        mesh, skel = toy_dataset.sequence_mesh(seq), toy_dataset.sequence_skeleton(seq)
        if not seq.contact.any():  # generated motion carries no labels; derive them geometrically
            seq = seq.copy(contact=evaluation.predicted_contacts(seq, mesh, skel, cfg["metrics"]["contact_threshold"]))
        kf, imgs = render.render_keyframes(seq, mesh, cam, skel)
        if args.grid:
            p = out / f"{sid}_strip.png"
            p.write_bytes(render.array_to_png(render.contact_strip(imgs)))
            written.append(p)
        else:
            for name, im in zip(("start", "peak", "end"), imgs):
                p = out / f"{sid}_{name}.png"
                p.write_bytes(render.array_to_png(im))
                written.append(p)
    write_run(out, "render", cfg, seed, t0, ids=ids, grid=bool(args.grid),
              digests={p.name: _file_sha(p) for p in written})
    print(f"wrote {len(written)} images to {out}")
    return 0


# ---------------------------------------------------------------- ablation

LAYER_GRID = [(3, 12), (3, 24), (12, 12), (12, 36), (24, 24), (36, 36), (3, 36)]
K_GRID = [1, 2, 4, 8]


def ablation_cells(text_layer_only: int = 12):
    """(row label, config overrides) for every comparison row."""
    cells = [(f"V{v}-T{t}", {"extraction": {"visual_layer": v, "text_layer": t}}) for v, t in LAYER_GRID]
    cells.append((f"T{text_layer_only}-only", {"extraction": {"text_layer": text_layer_only, "text_only": True}}))
    cells.append(("ViHOI-Pool", {"adapter": {"variant": "pool"}}))
    cells.append(("ViHOI-CLIP", {"extraction": {"text_source": "clip"}}))
    # visual query count varies; the text adapter keeps a single query
    cells += [(f"k={k}", {"adapter": {"k_visual": k, "k_text": 1}}) for k in K_GRID]
    return cells


def run_ablation(cfg, data_dir, evaluator, out_dir, seed: int, cells=None, log=print):
    """Train + evaluate every cell with the same data, ids, seeds and reference images."""
    from .generator import PriorExtractor
    from .priors import ExtractionConfig, LayerCache

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ab = cfg["ablate"]
    base = copy.deepcopy(cfg)
    base["encoder"]["depth"] = max(ab["encoder_depth"], base["encoder"]["depth"])
    base["train"]["steps"] = ab["steps"]
    base["train"]["checkpoint_every"] = 0
    train_ids, test_ids = generator.split_ids(data_dir, base)
    train_ids, test_ids = train_ids[: ab["n_train"]], test_ids[: ab["n_eval"]]
    shared = extractor_for(base, data_dir)        # one frozen encoder for every cell
    source = base["t2i"]["mode"]
    requests = pipeline.requests_for(data_dir, test_ids, source, base, seed)
    gts = [corpus.load_item(data_dir, sid) for sid in test_ids]
    cells = cells or ablation_cells()
    rows, fairness = [], {"data_seed": cfg["seed"], "train_seed": seed, "train_ids": train_ids,
                          "eval_ids": test_ids, "sample_seeds": {r.sid: r.seed for r in requests},
                          "reference_source": source, "encoder_checksum": shared.encoder.checksum()}
    cells = list(cells)
    # every layer any cell reads, within the encoder's depth; one encoder pass per item
    wanted = {3, 12}
    for _, over in cells:
        e = over.get("extraction", {})
        wanted |= {e.get("visual_layer", 3), e.get("text_layer", 12)}
    depth = getattr(shared.encoder, "depth", max(wanted))
    encoder = LayerCache(shared.encoder, [l for l in wanted if 1 <= l <= depth])
    for label, over in cells:
        t0 = time.time()
        cell_cfg = config._merge(copy.deepcopy(base), copy.deepcopy(over))
        e = cell_cfg["extraction"]
        extractor = PriorExtractor(encoder, ExtractionConfig(e["visual_layer"], e["text_layer"], e["text_only"]),
                                   e["text_source"])
        cell_dir = out_dir / label.replace("=", "")
        row = {"label": label}
        try:
            res = generator.train(data_dir, cell_cfg, seed, cell_dir / "checkpoint.zip", ids=train_ids,
                                  extractor=extractor)
            gen = generator.load_generator(res.checkpoint)
            preds = pipeline.run_requests(gen, extractor, requests, cell_cfg["diffusion"]["sample_steps"])
            report, _ = evaluation.score_sequences(preds, gts, evaluator, cell_cfg["metrics"], seed)
            row.update(report.to_dict(), status="ok", final_loss=res.losses[-1])
        except Exception as exc:  # a failing cell is reported, the grid is still written
            row.update(status=f"error: {type(exc).__name__}: {exc}")
            (cell_dir).mkdir(parents=True, exist_ok=True)
            (cell_dir / "error.txt").write_text(traceback.format_exc())
        row["seconds"] = round(time.time() - t0, 2)
        rows.append(row)
        log(f"{label}: {row['status']} ({row['seconds']} s)")
    write_ablation_tables(out_dir, rows, fairness)
    return rows, fairness


ABLATION_COLUMNS = ("label",) + evaluation._FIELDS + ("final_loss", "status")


def write_ablation_tables(out_dir, rows, fairness):
    out_dir = Path(out_dir)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in ABLATION_COLUMNS])
    (out_dir / "ablation.csv").write_text(buf.getvalue())
    md = ["| " + " | ".join(ABLATION_COLUMNS) + " |", "|" + "---|" * len(ABLATION_COLUMNS)]
    md += ["| " + " | ".join(_fmt(r.get(c)) for c in ABLATION_COLUMNS) + " |" for r in rows]
    (out_dir / "ablation.md").write_text("\n".join(md) + "\n")
    (out_dir / "ablation.json").write_text(json.dumps({"rows": rows, "fairness": fairness}, indent=2) + "\n")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def cmd_ablate(args, cfg, seed):
    t0 = time.time()
    data = _path(args, cfg, "data")
    out = _path(args, cfg, "ablation")
    ev_path = Path(args.evaluator) if args.evaluator else _path(args, cfg, "evaluator") / "evaluator.zip"
    _require(data / "manifest.json", "complete corpus")
    _require(ev_path, "evaluator")
    evaluator = evaluation.EvaluatorModel.load(ev_path)
    cells = ablation_cells()
    if args.only:
        cells = [c for c in cells if c[0] in set(args.only)]
    rows, fairness = run_ablation(cfg, data, evaluator, out, seed, cells)
    write_run(out, "ablate", cfg, seed, t0, fairness=fairness, labels=[r["label"] for r in rows])
    print((out / "ablation.md").read_text(), end="")
    return 0


# ---------------------------------------------------------------- services / utilities

def cmd_serve_encoder(args, cfg, seed):
    from .remote import EncoderServer
    extractor = generator.build_extractor(cfg)
    server = EncoderServer((args.host, args.port), extractor.encoder)
    h, p = server.server_address[:2]
    print(f"serving encoder {extractor.encoder.checksum()[:12]} on {h}:{p}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_mesh(args, cfg, seed):
    mesh = geometry.make_primitive(args.kind, tuple(args.dims))
    path = geometry.write_obj(mesh, args.out)
    print(f"{path}: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces, watertight={mesh.watertight}")
    return 0


# ---------------------------------------------------------------- parser

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-evaluator": cmd_train_evaluator,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
    "ablate": cmd_ablate,
    "serve-encoder": cmd_serve_encoder,
    "mesh": cmd_mesh,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="run seed (default: config seed)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--t2i", choices=("stub", "external"), help="text-to-image backend")
    common.add_argument("--encoder", choices=("toy", "external"), help="prior encoder backend")
    common.add_argument("--generator-variant", choices=("bps", "keypoint24"), help="object geometry input")
    for name in ("data", "evaluator", "model", "samples", "report", "renders", "ablation"):
        common.add_argument(f"--{name}-dir", dest=name, help=f"override paths.{name}")

    p = argparse.ArgumentParser(prog="vihoi", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common])
    s.add_argument("--n", type=int, help="number of sequences (default: dataset.n_sequences)")

    def with_ids(sp):
        sp.add_argument("--ids", nargs="+")
        sp.add_argument("--split", choices=("train", "test", "all"))
        sp.add_argument("--limit", type=int)

    with_ids(sub.add_parser("train-evaluator", parents=[common]))
    s = sub.add_parser("train", parents=[common])
    with_ids(s)
    s.add_argument("--steps", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("sample", parents=[common])
    with_ids(s)
    s.add_argument("--checkpoint")
    s.add_argument("--reference", choices=pipeline.REFERENCE_SOURCES,
                   help="reference images: text-to-image (stub/external) or corpus keyframes (gt)")
    s.add_argument("--text", help="replace every annotation with this text")
    s.add_argument("--save-references", action="store_true")

    s = sub.add_parser("evaluate", parents=[common])
    with_ids(s)
    s.add_argument("--checkpoint")
    s.add_argument("--evaluator")
    s.add_argument("--reference", choices=pipeline.REFERENCE_SOURCES)
    s.add_argument("--samples", help="score sequences written by `sample` instead of sampling")
    s.add_argument("--ground-truth", action="store_true", help="score the ground truth itself")

    s = sub.add_parser("render", parents=[common])
    with_ids(s)
    s.add_argument("--samples", help="render generated sequences from this directory")
    s.add_argument("--grid", action="store_true", help="one 3-keyframe contact strip per sequence")

    s = sub.add_parser("ablate", parents=[common])
    s.add_argument("--evaluator")
    s.add_argument("--only", nargs="+", metavar="LABEL", help="run a subset of rows")

    s = sub.add_parser("serve-encoder", parents=[common])
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)

    s = sub.add_parser("mesh", parents=[common])
    s.add_argument("kind", choices=geometry.PRIMITIVE_KINDS)
    s.add_argument("dims", type=float, nargs="+")
    s.add_argument("--out", required=True)
    return p


def resolve_config(args) -> dict:
    overrides = list(args.set)
    if args.t2i:
        overrides.append(f"t2i.mode={json.dumps(args.t2i)}")
    if args.encoder:
        overrides.append(f"encoder.backend={json.dumps(args.encoder)}")
    if args.generator_variant:
        overrides.append(f"diffusion.geometry={json.dumps(args.generator_variant)}")
    cfg = config.resolve(args.config, overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg, cfg["seed"])
    except (VihoiError, ConfigError, FileNotFoundError, ValueError) as e:
        print(f"vihoi {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
