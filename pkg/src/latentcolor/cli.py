"""Command-line entry point: ``latentcolor <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import metrics
from .config import RunConfig, add_config_flags, config_from_args
from .dataset import ClipManifest, FrameDataset, load_gray, load_image, save_png, scan_frames, split_by_subject
from .errors import ConfigurationError, LatentColorError
from .pipeline import ColorizeRequest, colorize_video, load_models
from .trainer import VAETrainer, build_vqvae, load_checkpoint, new_diffusion_trainer, DiffusionTrainer

logger = logging.getLogger("latentcolor")


def _write_json(path: Path, doc: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _json_number(x: float) -> float | str:
    return "inf" if math.isinf(x) else x


def _frame_paths(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory not found: {directory}")
    paths = [p for p in directory.glob("*.png") if p.stem.isdigit()]
    return sorted(paths, key=lambda p: int(p.stem))


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigurationError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------- commands


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    manifest = scan_frames(args.root)
    train, test = split_by_subject(manifest, args.test_fraction, cfg.resolved_seed())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train.save(out / "train.json")
    test.save(out / "test.json")
    print(out / "train.json")
    print(out / "test.json")
    return 0


def _train_dataset(cfg: RunConfig) -> FrameDataset:
    manifest = ClipManifest.load(_require(cfg.train_manifest, "train manifest"))
    if len(manifest) == 0:
        raise ConfigurationError(f"train manifest {cfg.train_manifest} has no frames")
    return FrameDataset(manifest, cfg.image_size)


def cmd_train_vae(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    dataset = _train_dataset(cfg)
    tcfg = cfg.train_config(cfg.vae_learning_rate)
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "vqvae_log.jsonl"
    ckpt = Path(cfg.vae_checkpoint)
    if args.resume and ckpt.exists():
        trainer = VAETrainer.resume(ckpt, tcfg, log_path)
    else:
        trainer = VAETrainer(build_vqvae(cfg.vae_config(), tcfg.seed), tcfg, log_path)
    remaining = tcfg.total_steps(len(dataset)) - trainer.step_count
    trainer.fit(dataset, max(remaining, 0), checkpoint_path=ckpt)
    trainer.save(ckpt)
    _write_json(run_dir / "vqvae_run.json", {"config": cfg.to_dict(), "config_hash": cfg.config_hash(),
                                             "steps": trainer.step_count, "checkpoint": str(ckpt)})
    print(ckpt)
    return 0


def cmd_train_diffusion(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    vae_path = _require(cfg.vae_checkpoint, "VQ-VAE checkpoint")
    dataset = _train_dataset(cfg)
    tcfg = cfg.train_config(cfg.learning_rate)
    vae = load_checkpoint(vae_path, "vqvae").model
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "denoiser_log.jsonl"
    ckpt = Path(cfg.denoiser_checkpoint)
    if args.resume and ckpt.exists():
        trainer = DiffusionTrainer.resume(ckpt, vae, tcfg, log_path)  # type: ignore[arg-type]
    else:
        trainer = new_diffusion_trainer(vae, dataset, tcfg, cfg.denoiser_config(), log_path)  # type: ignore[arg-type]
    remaining = tcfg.total_steps(len(dataset)) - trainer.step_count
    trainer.fit(dataset, max(remaining, 0), checkpoint_path=ckpt)
    trainer.save(ckpt)
    _write_json(run_dir / "denoiser_run.json", {"config": cfg.to_dict(), "config_hash": cfg.config_hash(),
                                                "steps": trainer.step_count, "checkpoint": str(ckpt)})
    print(ckpt)
    return 0


def cmd_colorize(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    models = load_models(_require(cfg.vae_checkpoint, "VQ-VAE checkpoint"),
                         _require(cfg.denoiser_checkpoint, "denoiser checkpoint"))
    paths = _frame_paths(Path(args.input))
    if not paths:
        raise ConfigurationError(f"no frames found in {args.input}")
    frames = [load_gray(p, models.image_size) for p in paths]
    exemplar = load_image(_require(args.exemplar, "exemplar"), models.image_size) if args.exemplar else None
    req = ColorizeRequest(frames, exemplar=exemplar, seed=cfg.resolved_seed(),
                          steps_infer=cfg.steps_infer, overlay=cfg.overlay)
    result = colorize_video(req, models)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p, frame in zip(paths, result.color_frames):
        save_png(frame, out / p.name)
    _write_json(out / "report.json", {
        "mode": "exemplar" if exemplar is not None else "bootstrap",
        "seed": req.seed,
        "steps": req.steps_infer,
        "frames": [p.name for p in paths],
        "per_frame_wallclock": result.per_frame_runtime,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
    })
    print(out / "report.json")
    return 0


def _load_clips(root: Path) -> dict[str, list[Path]]:
    """Leaf directories holding numbered PNGs, keyed by path relative to ``root``."""
    clips = {}
    for d in sorted([root, *[p for p in root.rglob("*") if p.is_dir()]]):
        frames = _frame_paths(d)
        if frames:
            clips[str(d.relative_to(root))] = frames
    return clips


def evaluate_dirs(pred_dir: Path, ref_dir: Path, cfg: RunConfig) -> dict[str, Any]:
    """Metric report for two aligned frame trees."""
    pred = _load_clips(pred_dir)
    ref = _load_clips(ref_dir)
    if set(pred) != set(ref):
        raise ValueError(f"clip sets differ: {sorted(set(pred) ^ set(ref))}")
    pred_frames, ref_frames, pred_clips, ref_clips = [], [], [], []
    for key in sorted(ref):
        names_p = [p.name for p in pred[key]]
        names_r = [p.name for p in ref[key]]
        if names_p != names_r:
            raise ValueError(
                f"clip {key!r}: {len(names_p)} predicted vs {len(names_r)} reference frames do not pair up"
            )
        p_imgs = [load_image(p) for p in pred[key]]
        r_imgs = [load_image(p) for p in ref[key]]
        pred_frames += p_imgs
        ref_frames += r_imgs
        pred_clips.append(np.stack(p_imgs))
        ref_clips.append(np.stack(r_imgs))
    return evaluate_frames(pred_frames, ref_frames, pred_clips, ref_clips, cfg)


def _windows(clips: list[np.ndarray], length: int) -> list[np.ndarray]:
    return [c[i:i + length] for c in clips for i in range(0, len(c) - length + 1, length)]


def evaluate_frames(pred_frames, ref_frames, pred_clips, ref_clips, cfg: RunConfig) -> dict[str, Any]:
    if len(pred_frames) != len(ref_frames):
        raise ValueError(f"{len(pred_frames)} predicted vs {len(ref_frames)} reference frames")
    embedder = metrics.get_embedder(cfg.embedder)
    psnrs = [metrics.psnr(p, r) for p, r in zip(pred_frames, ref_frames)]
    ssims = [metrics.ssim_rgb(p, r) for p, r in zip(pred_frames, ref_frames)]
    result: dict[str, Any] = {
        "psnr": _json_number(float(np.mean(psnrs))),
        "ssim": float(np.mean(ssims)),
        "fid": metrics.fid(pred_frames, ref_frames, embedder) if len(pred_frames) >= 2 else None,
    }
    pw = _windows(pred_clips, cfg.fvd_clip_length)
    rw = _windows(ref_clips, cfg.fvd_clip_length)
    result["fvd"] = metrics.fvd(pw, rw, embedder) if len(pw) >= 2 else None
    temporal = [metrics.temporal_consistency_score(c) for c in pred_clips if len(c) >= 2]
    result["temporal_consistency"] = float(np.mean(temporal)) if temporal else None
    return {
        "metrics": result,
        "embedder_id": embedder.id,
        "n_samples": len(pred_frames),
        "n_fvd_clips": len(pw),
        "notes": "PSNR on RGB in [0,1]; SSIM on BT.601 luma with an 8x8 uniform window; "
                 "FID/FVD relative to the named embedder",
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
    }


def format_table(report: dict[str, Any]) -> str:
    m = report["metrics"]
    cols = ["PSNR ↑", "SSIM ↑", "FID ↓", "FVD ↓", "Temporal ↓"]
    vals = [m["psnr"], m["ssim"], m["fid"], m["fvd"], m["temporal_consistency"]]

    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, str):
            return v
        return f"{v:.4f}"

    cells = [fmt(v) for v in vals]
    widths = [max(len(c), len(v)) for c, v in zip(cols, cells)]
    head = "  ".join(c.ljust(w) for c, w in zip(cols, widths))
    row = "  ".join(v.ljust(w) for v, w in zip(cells, widths))
    return f"{head}\n{row}\n(embedder: {report['embedder_id']}, n={report['n_samples']})"


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    report = evaluate_dirs(Path(args.pred), Path(args.ref), cfg)
    out = Path(args.out) if args.out else Path(args.pred) / "metrics.json"
    _write_json(out, report)
    print(format_table(report))
    print(out)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentcolor", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan a frame tree and write train/test manifests")
    p.add_argument("--root", required=True, help="root/<subject>/<clip>/<index>.png tree")
    p.add_argument("--out", required=True, help="directory for train.json and test.json")
    p.add_argument("--test-fraction", type=float, default=0.2)
    add_config_flags(p)
    p.set_defaults(func=cmd_ingest)

    for name, func, text in (
        ("train-vae", cmd_train_vae, "train the VQ-VAE"),
        ("train-diffusion", cmd_train_diffusion, "train the latent denoiser on a frozen VQ-VAE"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
        add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("colorize", help="colorize a directory of grayscale frames")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--exemplar", help="color image used as the condition for the first frame")
    add_config_flags(p)
    p.set_defaults(func=cmd_colorize)

    p = sub.add_parser("evaluate", help="compare predicted frames with references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", help="report path (default: <pred>/metrics.json)")
    add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (LatentColorError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
