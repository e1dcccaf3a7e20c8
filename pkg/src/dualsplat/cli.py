"""Command-line pipeline: gen -> train -> simulate -> evaluate (+ prune).

Every failure exits non-zero with a machine-readable JSON error on stderr;
numeric outputs are bit-reproducible for a fixed ``--seed``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import List, Optional

import numpy as np

from . import io as dsio
from .core import SceneTransform
from .losses import LossConfig
from .metrics import psnr, ssim
from .rasterizer import RasterSettings, render
from .scenegen import SceneSpec, generate
from .statetransfer import co_prune, synthesize_target
from .trainer import TrainConfig, train


def _load_json(path: str):
    with open(path) as fh:
        return json.load(fh)


def _spec_from_json(obj: dict) -> SceneSpec:
    return SceneSpec(**obj)


def _config_from_json(obj: dict) -> TrainConfig:
    loss = LossConfig(**obj.pop("loss")) if "loss" in obj else LossConfig()
    return TrainConfig(loss=loss, **obj)


def _cmd_gen(args) -> int:
    spec_obj = _load_json(args.spec) if args.spec else {}
    if args.seed is not None:
        spec_obj["seed"] = args.seed
    bundle = generate(_spec_from_json(spec_obj))
    dsio.save_bundle(bundle, args.out)
    print(f"wrote scene bundle to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg_obj = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg_obj["seed"] = args.seed
    cfg = _config_from_json(cfg_obj)
    bundle = dsio.load_bundle(args.scene)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "train_log.jsonl"), "w") as log:
        result = train(bundle, cfg, out_dir=args.out, log_stream=log)
    dsio.save_field(os.path.join(args.out, "field1.dsgw"), result.field1, result.classifier)
    dsio.save_field(os.path.join(args.out, "field2.dsgw"), result.field2, result.classifier)
    meta = {
        "scene": os.path.abspath(args.scene),
        "t_12": dsio.scene_transform_to_json(bundle.t_12),
        "cameras": [dsio.camera_to_json(c, "train") for c in bundle.cameras]
                   + [dsio.camera_to_json(c, "test") for c in bundle.test_cameras],
        "config": _config_json(cfg),
    }
    if result.prune_report is not None:
        meta["prune_report"] = result.prune_report.to_json()
    dsio._write_json(os.path.join(args.out, "meta.json"), meta)
    print(f"trained {cfg.phase1_iters}+{cfg.phase2_iters} iterations; checkpoints in {args.out}")
    return 0


def _config_json(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["loss"] = dataclasses.asdict(cfg.loss)
    return d


def _load_checkpoint_pair(ckpt_dir: str):
    c1 = dsio.load_field(os.path.join(ckpt_dir, "field1.dsgw"))
    c2 = dsio.load_field(os.path.join(ckpt_dir, "field2.dsgw"))
    meta = _load_json(os.path.join(ckpt_dir, "meta.json"))
    return c1, c2, meta


def _cmd_simulate(args) -> int:
    c1, c2, meta = _load_checkpoint_pair(args.ckpt)
    state_obj = _load_json(args.state)
    state_obj = state_obj.get("per_object", state_obj)
    t_1t = dsio.scene_transform_from_json(state_obj)
    t_12 = dsio.scene_transform_from_json(meta["t_12"])

    target = synthesize_target(c1.field, c2.field, t_12, t_1t,
                               tau=meta["config"].get("tau", 0.5),
                               tau_paste=meta["config"].get("tau_paste", 0.05))

    cams = [dsio.camera_from_json(c) for c in meta["cameras"] if c["split"] == args.views]
    settings = RasterSettings(g_min=meta["config"].get("raster_g_min", 0.01))
    os.makedirs(args.out, exist_ok=True)
    for i, cam in enumerate(cams):
        out = render(target, cam, settings)
        dsio.write_png(os.path.join(args.out, f"rgb_{i:03d}.png"), out.color_image)
        np.save(os.path.join(args.out, f"rgb_{i:03d}.npy"), np.clip(out.color_image, 0.0, 1.0))
    print(f"rendered {len(cams)} {args.views} views to {args.out}")
    return 0


def _find_views(directory: str) -> List[str]:
    names = sorted(f[:-4] for f in os.listdir(directory) if f.startswith("rgb_") and f.endswith(".png"))
    if not names:
        names = sorted(f[:-4] for f in os.listdir(directory) if f.startswith("rgb_") and f.endswith(".npy"))
    return names


def _load_view(directory: str, name: str):
    """(float image, quantized image) for one view; floats prefer the .npy dump."""
    png = os.path.join(directory, name + ".png")
    npy = os.path.join(directory, name + ".npy")
    quant = dsio.read_png(png) if os.path.exists(png) else None
    flt = np.load(npy) if os.path.exists(npy) else quant
    if flt is None:
        raise FileNotFoundError(f"no image for view {name} in {directory}")
    return flt, (quant if quant is not None else flt)


def _cmd_evaluate(args) -> int:
    names = _find_views(args.renders)
    if not names:
        raise FileNotFoundError(f"no rgb_* views found in {args.renders}")
    per_view = []
    for name in names:
        render_f, render_q = _load_view(args.renders, name)
        truth_f, truth_q = _load_view(args.truth, name)
        per_view.append({
            "view": name,
            "psnr": psnr(render_f, truth_f),
            "ssim": ssim(render_f, truth_f),
            "psnr_quantized": psnr(render_q, truth_q),
            "ssim_quantized": ssim(render_q, truth_q),
        })
    report = {
        "views": per_view,
        "mean_psnr": float(np.mean([v["psnr"] for v in per_view])),
        "mean_ssim": float(np.mean([v["ssim"] for v in per_view])),
        "mean_psnr_quantized": float(np.mean([v["psnr_quantized"] for v in per_view])),
        "mean_ssim_quantized": float(np.mean([v["ssim_quantized"] for v in per_view])),
    }
    if args.report:
        dsio._write_json(args.report, report)
    print(f"mean PSNR {report['mean_psnr']:.2f} dB, mean SSIM {report['mean_ssim']:.4f} "
          f"over {len(per_view)} views")
    return 0


def _cmd_prune(args) -> int:
    c1, c2, meta = _load_checkpoint_pair(args.ckpt)
    t_12 = dsio.scene_transform_from_json(meta["t_12"])
    report = co_prune(c1.field, c2.field, t_12, tau=args.tau)
    if args.report:
        dsio._write_json(args.report, report.to_json())
    print(f"co-prune tau={args.tau}: {len(report.removed_from_1)} removed from field 1, "
          f"{len(report.removed_from_2)} from field 2")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualsplat",
                                description="dual-state Gaussian world model pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dual-state scene bundle")
    g.add_argument("--spec", help="SceneSpec JSON file (defaults apply when omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=_cmd_gen)

    t = sub.add_parser("train", help="optimize the dual fields on a scene bundle")
    t.add_argument("--scene", required=True)
    t.add_argument("--config", help="TrainConfig JSON file")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=_cmd_train)

    s = sub.add_parser("simulate", help="synthesize a novel object configuration and render it")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--state", required=True, help="JSON with per-object transforms")
    s.add_argument("--views", choices=["train", "test"], default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_simulate)

    e = sub.add_parser("evaluate", help="PSNR/SSIM of rendered views against ground truth")
    e.add_argument("--renders", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--report")
    e.set_defaults(func=_cmd_evaluate)

    pr = sub.add_parser("prune", help="standalone collaborative co-pruning report")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--tau", type=float, default=0.5)
    pr.add_argument("--report")
    pr.set_defaults(func=_cmd_prune)
    return p


def cli(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # pragma: no cover - exercised via subcommand tests
        err = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli(sys.argv[1:]))
