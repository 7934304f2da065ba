"""Command-line drivers: fitting, retargeting, prediction, training and evaluation.

Every subcommand is deterministic given its inputs and seed.  Frame outputs
go to ``frame_XXXX.png`` (prior), ``frame_XXXX_mask.png``, ``frame_XXXX.obj``
and ``frame_XXXX_landmarks.json`` plus ``coeffs.jsonl`` and a ``manifest.json``
that lists every file with its sha256.  Wall-clock timings are kept apart in
``timing.json`` so the manifest itself stays reproducible.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynpred, evalmetrics, spmap, synth
from .mmodel import (
    CoeffVector,
    ModelFormatError,
    MorphableModel,
    SingularSystemError,
    camera_points,
    evaluate_shape,
    fit_landmarks,
    landmarks_from_coeffs,
    load_model,
    read_coeff_sequence,
    recombine,
    save_model,
    write_coeff_sequence,
    write_obj,
)

log = logging.getLogger("facedyn")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_FORMAT = 0, 2, 3, 4
SEED_ENV = "FACEDYN_SEED"


class InputError(Exception):
    pass


class FormatError(Exception):
    pass


@dataclass
class PipelineConfig:
    model_path: Path
    interval: int = 1
    size: tuple[int, int] = (128, 128)
    seed: int = 0
    T: int = 24
    workers: int = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.interval < 1:
            raise InputError("--interval must be >= 1")
        if self.T < 1:
            raise InputError("-T must be >= 1")
        if min(self.size) < 1:
            raise InputError("--size must be positive")
        if self.workers < 1:
            raise InputError("--workers must be >= 1")

    def raster(self) -> spmap.RasterConfig:
        return spmap.RasterConfig(width=self.size[0], height=self.size[1])


def resolve_seed(seed: int) -> int:
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return seed
    try:
        return int(env)
    except ValueError:
        raise InputError(f"{SEED_ENV} must be an integer, got {env!r}") from None


# ---------------------------------------------------------------- file helpers

def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    return path


def _read_model(path) -> MorphableModel:
    return load_model(_need(path))


def _read_coeffs(path) -> list[CoeffVector]:
    try:
        seq = read_coeff_sequence(_need(path))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    if not seq:
        raise InputError(f"{path} holds no coefficient vectors")
    return seq


def _read_single(path) -> CoeffVector:
    return _read_coeffs(path)[0]


def _read_image(path) -> np.ndarray:
    try:
        return spmap.load_image(_need(path))
    except InputError:
        raise
    except Exception as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc


def _read_landmarks(path) -> np.ndarray:
    with open(_need(path)) as fh:
        try:
            data = np.asarray(json.load(fh), dtype=np.float64)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if data.ndim == 2 and data.shape[1] == 2 and data.shape[0] != 2:
        data = data.T
    return data


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, meta: dict) -> Path:
    """Hash every file in ``out_dir`` (except the manifest and timings) into manifest.json."""
    out_dir = Path(out_dir)
    files = sorted(p.name for p in out_dir.iterdir()
                   if p.is_file() and p.name not in ("manifest.json", "timing.json"))
    manifest = dict(meta, files={name: sha256(out_dir / name) for name in files})
    path = out_dir / "manifest.json"
    _write_json(path, manifest)
    return path


def validate_manifest(out_dir) -> list[str]:
    """Problems found when re-reading a manifest; empty when it matches the directory."""
    out_dir = Path(out_dir)
    try:
        manifest = json.loads((out_dir / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        return [f"unreadable manifest: {exc}"]
    problems = []
    files = manifest.get("files", {})
    for name, digest in files.items():
        if not (out_dir / name).exists():
            problems.append(f"missing {name}")
        elif sha256(out_dir / name) != digest:
            problems.append(f"hash mismatch {name}")
    count = manifest.get("count")
    if count is not None:
        n_priors = sum(1 for n in files if n.startswith("frame_") and n.endswith(".png") and "_mask" not in n)
        if n_priors != count:
            problems.append(f"count {count} but {n_priors} frames listed")
    return problems


# ---------------------------------------------------------------- frame rendering

def _render_frame(model, image, src_c, tgt_c, cfg: PipelineConfig):
    prior = spmap.render_sparse_prior(model, image, src_c, tgt_c, n=cfg.interval, cfg=cfg.raster())
    verts = camera_points(evaluate_shape(model, tgt_c), tgt_c)
    return prior, verts, landmarks_from_coeffs(model, tgt_c)


def write_frames(model: MorphableModel, image: np.ndarray, src_c: CoeffVector, targets: list[CoeffVector],
                 out_dir, cfg: PipelineConfig, meta: dict) -> dict:
    """Render and write one prior/mask/OBJ/landmark set per target, then the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def job(k):
        try:
            return _render_frame(model, image, src_c, targets[k], cfg)
        except Exception as exc:
            raise RuntimeError(f"frame {k}: {exc}") from exc

    t0 = time.perf_counter()
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(job, range(len(targets))))
    else:
        results = [job(k) for k in range(len(targets))]
    render_s = time.perf_counter() - t0

    landmarks = []
    for k, (prior, verts, lm) in enumerate(results):
        stem = out_dir / f"frame_{k:04d}"
        spmap.save_prior(prior, f"{stem}.png", f"{stem}_mask.png")
        write_obj(f"{stem}.obj", verts, model.triangles)
        _write_json(f"{stem}_landmarks.json", lm.tolist())
        landmarks.append(lm)
    write_coeff_sequence(out_dir / "coeffs.jsonl", targets)

    kept = results[0][0].stats if results else None
    summary = dict(meta, count=len(targets), interval=cfg.interval, size=list(cfg.size),
                   smoothness=evalmetrics.smoothness(landmarks),
                   n_triangles_total=model.n_triangles,
                   n_triangles_kept=kept.n_triangles_kept if kept else 0,
                   n_vertices_touched=kept.n_vertices_touched if kept else 0)
    write_manifest(out_dir, summary)
    _write_json(out_dir / "timing.json", {
        "render_s_total": render_s,
        "mapping_s_per_frame": [r[0].stats.elapsed_s for r in results],
    })
    return summary


# ---------------------------------------------------------------- pipelines

def run_retarget(model, image, src_c, reference, out_dir, cfg: PipelineConfig, mode: str = "expr") -> dict:
    if not reference:
        raise InputError("reference sequence is empty")
    if mode == "expr":
        targets = [recombine(src_c, r, take_expr=True) for r in reference]
    elif mode == "talk":
        targets = [recombine(src_c, r, take_pose=True, take_expr=True) for r in reference]
    else:
        raise InputError(f"unknown retarget mode {mode!r}")
    return write_frames(model, image, src_c, targets, out_dir, cfg, {"command": "retarget", "mode": mode})


def _hold_shape(src_c: CoeffVector, seq: list[CoeffVector]) -> list[CoeffVector]:
    return [recombine(c, src_c, take_shape=True) for c in seq]


def run_predict(model, image, src_c, predictor: dynpred.DynPredictor, out_dir, cfg: PipelineConfig) -> dict:
    seq = _hold_shape(src_c, dynpred.predict_sequence(predictor, src_c, cfg.T))
    return write_frames(model, image, src_c, seq, out_dir, cfg, {"command": "predict", "T": cfg.T})


def run_predict_target(model, image, src_c, tgt_c, predictor: dynpred.DynPredictor | None, out_dir,
                       cfg: PipelineConfig, cell_mode: str = "replace") -> dict:
    if predictor is None:
        seq = dynpred.interpolate_sequence(src_c, tgt_c, cfg.T)
        meta = {"command": "predict-to-target", "method": "interpolate", "T": cfg.T}
    else:
        seq = _hold_shape(src_c, dynpred.predict_target_driven(predictor, src_c, tgt_c, cfg.T, cell_mode))
        meta = {"command": "predict-to-target", "method": "lstm", "cell_mode": cell_mode, "T": cfg.T,
                "endpoint_distance": predictor.norm.distance(seq[-1], tgt_c)}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_coeff_sequence(out_dir / "final_coeffs.jsonl", seq[-1:])
    return write_frames(model, image, src_c, seq, out_dir, cfg, meta)


# ---------------------------------------------------------------- subcommands

def _config(args) -> PipelineConfig:
    return PipelineConfig(model_path=Path(args.model), interval=getattr(args, "interval", 1),
                          size=tuple(getattr(args, "size", (128, 128))), seed=resolve_seed(args.seed),
                          T=getattr(args, "T", 24), workers=getattr(args, "workers", 1))


def _load_predictor(path) -> dynpred.DynPredictor:
    return dynpred.load_predictor(_need(path))


def cmd_fit(args) -> dict:
    model = _read_model(args.model)
    res = fit_landmarks(model, _read_landmarks(args.landmarks), reg=args.reg, max_iter=args.max_iter)
    write_coeff_sequence(args.out, [res.coeffs])
    info = {"objective": res.objective[-1], "iterations": res.n_iter, "converged": res.converged}
    if not res.converged:
        log.warning("fit did not converge in %d iterations", res.n_iter)
    return info


def cmd_retarget(args) -> dict:
    cfg = _config(args)
    model = _read_model(args.model)
    return run_retarget(model, _read_image(args.source_image), _read_single(args.source_coeffs),
                        _read_coeffs(args.reference), args.out, cfg, args.mode)


def cmd_predict(args) -> dict:
    cfg = _config(args)
    model = _read_model(args.model)
    return run_predict(model, _read_image(args.source_image), _read_single(args.source_coeffs),
                       _load_predictor(args.predictor), args.out, cfg)


def cmd_predict_to_target(args) -> dict:
    cfg = _config(args)
    if args.interpolate == (args.predictor is not None):
        raise InputError("give exactly one of --predictor or --interpolate")
    model = _read_model(args.model)
    pred = None if args.interpolate else _load_predictor(args.predictor)
    return run_predict_target(model, _read_image(args.source_image), _read_single(args.source_coeffs),
                              _read_single(args.target_coeffs), pred, args.out, cfg, args.cell_mode)


def cmd_render_prior(args) -> dict:
    cfg = _config(args)
    model = _read_model(args.model)
    return write_frames(model, _read_image(args.source_image), _read_single(args.source_coeffs),
                        _read_coeffs(args.target_coeffs), args.out, cfg, {"command": "render-prior"})


def cmd_train(args) -> dict:
    seed = resolve_seed(args.seed)
    model = _read_model(args.model)
    paths = [_need(p) for p in args.data]
    dataset = dynpred.TrajectoryDataset.from_jsonl(paths)
    cfg = dynpred.TrainConfig(
        lambda1=args.lambda1, seq_len=args.T, learn_rate=args.lr, epochs=args.epochs,
        grad_clip=args.grad_clip, seed=seed, fixed_point=not args.no_fixed_point,
        batch_size=args.batch_size, hidden_size=args.hidden, teacher_forcing=not args.free_running,
        vertex_loss_with_pose=args.vertex_loss_with_pose, cell_mode=args.cell_mode, lr_final=args.lr_final)
    mode = {"free": "free", "target": "target", "interp": "interp"}[args.mode]
    predictor, history = dynpred.train_predictor(model, dataset, cfg, mode)
    dynpred.save_predictor(predictor, args.out)
    if args.history:
        _write_json(args.history, {"mode": mode, "seed": seed, "loss": history})
    return {"epochs": len(history), "initial_loss": history[0] if history else None,
            "final_loss": history[-1] if history else None}


def _frame_names(d: Path) -> list[str]:
    return sorted(p.name for p in d.glob("*.png") if not p.name.endswith("_mask.png"))


def cmd_metrics(args) -> dict:
    pred_dir, truth_dir = _need(args.pred), _need(args.truth)
    names = [n for n in _frame_names(pred_dir) if (truth_dir / n).exists()]
    if not names:
        raise InputError("no same-named PNGs in the two directories")
    rows = []
    for name in names:
        a, b = _read_image(pred_dir / name), _read_image(truth_dir / name)
        row = {"frame": name, "psnr": evalmetrics.psnr(a, b), "ssim": evalmetrics.ssim(a, b), "lrms": ""}
        if args.pred_landmarks and args.truth_landmarks:
            lm = name[:-4] + "_landmarks.json"
            pl, tl = Path(args.pred_landmarks) / lm, Path(args.truth_landmarks) / lm
            if pl.exists() and tl.exists():
                row["lrms"] = evalmetrics.lrms(_read_landmarks(pl), _read_landmarks(tl),
                                               normalize=not args.raw_lrms)
        rows.append(row)
    mean = {"frame": "mean"}
    for key in ("psnr", "ssim", "lrms"):
        vals = [r[key] for r in rows if r[key] != ""]
        mean[key] = float(np.mean(vals)) if vals else ""
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["frame", "psnr", "ssim", "lrms"])
        w.writeheader()
        for r in rows + [mean]:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return {"frames": len(rows), **{k: mean[k] for k in ("psnr", "ssim", "lrms")}}


def cmd_gen_synth(args) -> dict:
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = synth.face_model(seed=seed, grid=(args.grid, args.grid))
    save_model(model, out / "model.fmm")
    spmap.save_image(synth.texture_image(seed=seed, size=tuple(args.size)), out / "source.png")
    center = (args.size[0] / 2.0, args.size[1] / 2.0)
    rng = np.random.default_rng(seed)
    write_coeff_sequence(out / "source_coeffs.jsonl", [synth.random_coeffs(rng, center=center, max_yaw=0.2)])
    write_coeff_sequence(out / "target_coeffs.jsonl", [synth.random_coeffs(rng, center=center, max_yaw=0.2)])
    ref = synth.sinusoid_trajectories(1, args.frames, seed=seed + 1, center=center)[0]
    write_coeff_sequence(out / "reference.jsonl", ref)
    train_dir = out / "train"
    train_dir.mkdir(exist_ok=True)
    seqs = synth.sinusoid_trajectories(args.n_seq, args.length, seed=seed, center=center)
    for k, s in enumerate(seqs):
        write_coeff_sequence(train_dir / f"seq_{k:03d}.jsonl", s)
    return {"model": str(out / "model.fmm"), "n_seq": args.n_seq, "frames": args.frames}


# ---------------------------------------------------------------- argument parsing

def _common(p, frames=True):
    p.add_argument("--model", required=True, help="model container (.fmm)")
    p.add_argument("--seed", type=int, default=0)
    if frames:
        p.add_argument("--source-image", required=True)
        p.add_argument("--source-coeffs", required=True, help="JSONL; the first line is used")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--interval", type=int, default=1, help="triangle interval n")
        p.add_argument("--size", type=int, nargs=2, default=(128, 128), metavar=("W", "H"))
        p.add_argument("--workers", type=int, default=1, help="threads for frame rendering")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="facedyn", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit coefficients to a 2x68 landmark JSON file")
    p.add_argument("--model", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reg", type=float, default=1e-3)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("retarget", help="render priors following a reference sequence")
    _common(p)
    p.add_argument("--reference", required=True)
    p.add_argument("--mode", choices=("expr", "talk"), default="expr")
    p.set_defaults(func=cmd_retarget)

    p = sub.add_parser("predict", help="free-running prediction from the source")
    _common(p)
    p.add_argument("--predictor", required=True)
    p.add_argument("-T", type=int, default=24)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("predict-to-target", help="target-driven prediction or interpolation")
    _common(p)
    p.add_argument("--target-coeffs", required=True)
    p.add_argument("--predictor")
    p.add_argument("--interpolate", action="store_true")
    p.add_argument("--cell-mode", choices=dynpred.CELL_MODES, default="replace")
    p.add_argument("-T", type=int, default=24)
    p.set_defaults(func=cmd_predict_to_target)

    p = sub.add_parser("render-prior", help="render priors for explicit target coefficients")
    _common(p)
    p.add_argument("--target-coeffs", required=True)
    p.set_defaults(func=cmd_render_prior)

    p = sub.add_parser("train-3ddp", help="train the dynamic predictor")
    _common(p, frames=False)
    p.add_argument("--data", nargs="+", required=True, help="coefficient JSONL files")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--mode", choices=("free", "target", "interp"), default="free")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-final", type=float, default=1.0, help="cosine-decay floor as a fraction of --lr")
    p.add_argument("--lambda1", type=float, default=1e3)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--grad-clip", type=float, default=5.0)
    p.add_argument("-T", type=int, default=24)
    p.add_argument("--cell-mode", choices=dynpred.CELL_MODES, default="replace")
    p.add_argument("--vertex-loss-with-pose", action="store_true")
    p.add_argument("--free-running", action="store_true", help="feed predictions back during training")
    p.add_argument("--no-fixed-point", action="store_true")
    p.add_argument("--history", help="write the per-epoch loss history as JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("metrics", help="PSNR/SSIM/LRMS between two frame directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--pred-landmarks")
    p.add_argument("--truth-landmarks")
    p.add_argument("--raw-lrms", action="store_true", help="report LRMS in pixels")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gen-synth", help="write a synthetic model, texture and trajectories")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=24)
    p.add_argument("--frames", type=int, default=10, help="reference sequence length")
    p.add_argument("--n-seq", type=int, default=20)
    p.add_argument("--length", type=int, default=48)
    p.add_argument("--size", type=int, nargs=2, default=(128, 128), metavar=("W", "H"))
    p.set_defaults(func=cmd_gen_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        result = args.func(args)
    except (InputError, FileNotFoundError, IsADirectoryError) as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    except (SingularSystemError, dynpred.TrainingDivergedError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ModelFormatError, dynpred.CheckpointError, FormatError, json.JSONDecodeError) as exc:
        log.error("format error: %s", exc)
        return EXIT_FORMAT
    except (ValueError, RuntimeError) as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
