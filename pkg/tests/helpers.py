"""Shared constructors for tests."""
import numpy as np
from vihoi import config
from vihoi.motion import IDENTITY_6D, N_JOINTS, MotionSequence, matrix_to_rot6d, random_rotations


def identity_sequence(L=4, root=(0.0, 0.93, 0.0), obj=(0.0, 0.0, 0.6), text="Lift the box, and set it back down."):
    return MotionSequence(
        root_transl=np.tile(np.asarray(root, float), (L, 1)),
        joint_rot6d=np.tile(np.asarray(IDENTITY_6D, float), (L, N_JOINTS, 1)),
        obj_transl=np.tile(np.asarray(obj, float), (L, 1)),
        obj_rot6d=np.tile(np.asarray(IDENTITY_6D, float), (L, 1)),
        contact=np.zeros((L, 2), bool),
        text=text,
    )


def random_sequence(rng, L=6):
    rot = matrix_to_rot6d(random_rotations(L * N_JOINTS, rng)).reshape(L, N_JOINTS, 6)
    return MotionSequence(
        root_transl=rng.normal(size=(L, 3)),
        joint_rot6d=rot,
        obj_transl=rng.normal(size=(L, 3)),
        obj_rot6d=matrix_to_rot6d(random_rotations(L, rng)),
        contact=rng.random((L, 2)) < 0.5,
    )


def small_config(tmp, **sections):
    """Config with all paths under `tmp` and a small denoiser, for fast end-to-end runs."""
    cfg = config.resolve()
    for k in cfg["paths"]:
        cfg["paths"][k] = str(tmp / k)
    cfg["diffusion"].update(d_model=64, layers=2, sample_steps=5)
    cfg["evaluator"].update(epochs=3)
    for sec, vals in sections.items():
        cfg[sec].update(vals)
    return cfg


def write_toml(path, cfg):
    """Minimal TOML writer for nested dicts of scalars / lists."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines = [f"{k} = {fmt(v)}" for k, v in cfg.items() if not isinstance(v, dict)]
    for sec, vals in cfg.items():
        if isinstance(vals, dict):
            lines.append(f"\n[{sec}]")
            lines += [f"{k} = {fmt(v)}" for k, v in vals.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def make_corpus(path, n, seed=0):
    """Corpus with rendered keyframes, via the gen-data command."""
    from vihoi.cli import main
    assert main(["gen-data", "--data-dir", str(path), "--n", str(n), "--seed", str(seed)]) == 0
    return path


ACCEPTANCE = {}


def verdict(n, title, ok, detail):
    """Record one acceptance line (printed again in the session summary) and assert it."""
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line
