"""Command-line entry points for the full workflow.

Exit codes: 0 success, 1 user error (bad flags/inputs), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(message)


class UserError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scenescale",
                description="Learn valid object scale ranges from a monocular "
                            "clip and sample consistent scene configurations.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene bundle")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--objects", type=int, default=2)
    s.add_argument("--frames", type=int, default=15)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.add_argument("--heldout-configs", type=int, default=5)
    s.add_argument("--heldout-views", type=int, default=6)
    s.add_argument("--oracle-resolution", type=int, default=None)

    for name, help_txt in (("bootstrap", "stage-1 only: fit per-object fields"),
                           ("train", "full two-stage training")):
        t = sub.add_parser(name, help=help_txt)
        t.add_argument("--scene", required=True)
        t.add_argument("--out", required=True, help="checkpoint path")
        t.add_argument("--report", default=None)
        t.add_argument("--config", default=None, help="JSON file of config overrides")
        t.add_argument("--seed", type=int, default=None)
        if name == "train":
            t.add_argument("--rounds", type=int, default=None)
            t.add_argument("--skip-bootstrap", action="store_true")

    s = sub.add_parser("sample", help="rejection-sample valid scale combinations")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--threshold", type=float, default=0.95)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("render", help="composite-render a view under given scales")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scales", required=True,
                   help="comma-separated normalized scales, anchor first (1)")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--width", type=int, default=None)
    s.add_argument("--height", type=int, default=None)
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--out", required=True)
    s.add_argument("--depth-out", default=None,
                   help="also write depth as float32 raster + JSON sidecar")

    s = sub.add_parser("oracle", help="brute-force valid-region grid from GT")
    s.add_argument("--scene", required=True)
    s.add_argument("--resolution", type=int, default=101)
    s.add_argument("--theta", type=float, default=0.999)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="best-of-n multi-ground-truth evaluation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--samples", type=int, default=200)
    s.add_argument("--views-per-config", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("bench", help="soft-Z vs composite labeling benchmark")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--rays", type=int, default=64)
    s.add_argument("--sweep", default="4,16,64")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--out", required=True)

    s = sub.add_parser("serve", help="HTTP service for the explorer UI")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", default=None)
    s.add_argument("--port", type=int, default=7870)
    s.add_argument("--threads", type=int, default=0)
    s.add_argument("--ui", default=None, help="static UI directory")
    s.add_argument("--deterministic", action="store_true")
    return p


def _load_train_config(args):
    from .trainer import TrainConfig
    overrides = {}
    if args.config:
        overrides.update(json.loads(Path(args.config).read_text()))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "rounds", None) is not None:
        overrides["rounds"] = args.rounds
    if getattr(args, "skip_bootstrap", False):
        overrides["skip_bootstrap"] = True
    base = TrainConfig().__dict__ | overrides
    return TrainConfig.from_dict(base)


def _parse_scales(text: str, num_objects: int) -> np.ndarray:
    vals = np.asarray([float(v) for v in text.split(",")])
    if vals.shape[0] != num_objects:
        raise UserError(f"expected {num_objects} scales, got {vals.shape[0]}")
    if vals[0] != 1.0:
        raise UserError("anchor scale (first entry) must be 1")
    if vals.shape[0] > 1 and not ((vals[1:] >= 0) & (vals[1:] < 1)).all():
        raise UserError("non-anchor scales must lie in [0, 1)")
    return vals


def write_depth_raster(path, depth: np.ndarray, metric_note: str):
    depth32 = np.ascontiguousarray(depth, dtype="<f4")
    Path(path).write_bytes(depth32.tobytes())
    sidecar = {"width": int(depth.shape[1]), "height": int(depth.shape[0]),
               "dtype": "<f4", "order": "row-major", "metric": metric_note}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def run(argv) -> int:
    args = build_parser().parse_args(argv)
    cmd = args.command

    if cmd == "synth":
        from .scenegen import save_bundle, synthesize
        bundle = synthesize(args.seed, args.objects, args.frames, args.size,
                            heldout_configs=args.heldout_configs,
                            heldout_views=args.heldout_views,
                            oracle_resolution=args.oracle_resolution)
        save_bundle(bundle, args.out)
        print(f"wrote scene bundle to {args.out} "
              f"({args.objects} objects, {args.frames} frames)")
        return 0

    if cmd in ("bootstrap", "train"):
        import torch
        from .scenegen import load_bundle
        from .trainer import (TrainConfig, anchor_object, prepare_fields,
                              reorder_bundle, save_checkpoint, stage1_bootstrap,
                              train_full)
        bundle = load_bundle(args.scene)
        cfg = _load_train_config(args)
        if cmd == "train":
            train_full(bundle, cfg, checkpoint_path=args.out,
                       report_path=args.report)
        else:
            if cfg.deterministic:
                torch.set_num_threads(1)
            torch.manual_seed(cfg.seed)
            bundle = reorder_bundle(bundle, anchor_object(bundle))
            fields = prepare_fields(bundle, cfg)
            fields, curve = stage1_bootstrap(fields, bundle, cfg)
            save_checkpoint(args.out, fields, None, bundle, cfg)
            if args.report:
                Path(args.report).write_text(json.dumps(
                    {"stage1_loss": curve, "config": cfg.__dict__}, default=list))
        print(f"wrote checkpoint to {args.out}")
        return 0

    if cmd == "sample":
        from .scalenet import SamplerConfig, sample_valid_combination
        from .trainer import load_checkpoint
        ck = load_checkpoint(args.ckpt)
        if ck.scale_net is None:
            raise UserError("checkpoint has no scale network (bootstrap only?)")
        rng = np.random.default_rng(args.seed)
        cfg = SamplerConfig(validity_threshold=args.threshold, rng_seed=args.seed)
        from .scalenet import predict_validity
        out = []
        for _ in range(args.count):
            combo, attempts = sample_valid_combination(ck.scale_net, cfg, rng)
            out.append({"scales": combo.normalized.tolist(),
                        "denorm": combo.denorm(ck.bounds).tolist(),
                        "score": predict_validity(ck.scale_net, combo),
                        "attempts": attempts})
        Path(args.out).write_text(json.dumps(out, indent=2))
        print(f"wrote {len(out)} combinations to {args.out}")
        return 0

    if cmd == "render":
        from PIL import Image
        from . import compositor as comp_mod
        from .objectfield import RenderConfig
        from .trainer import load_checkpoint
        ck = load_checkpoint(args.ckpt)
        scales = _parse_scales(args.scales, ck.num_objects)
        if not (0 <= args.frame < ck.poses.num_frames):
            raise UserError(f"frame {args.frame} outside 0..{ck.poses.num_frames - 1}")
        from .geometry import ScaleCombination
        denorm = ScaleCombination(scales).denorm(ck.bounds)
        rcfg = RenderConfig(samples_per_ray=args.samples, jitter=False)
        out = comp_mod.render_full_image(ck.fields, ck.poses.frame(args.frame),
                                         ck.intrinsics, denorm, ck.bounds, rcfg,
                                         width=args.width, height=args.height)
        img = (out["color"] * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(img).save(args.out)
        if args.depth_out:
            write_depth_raster(args.depth_out, out["depth"],
                               "scene metric under the given denormalized scales")
        print(f"wrote render to {args.out}")
        return 0

    if cmd == "oracle":
        from .scenegen import load_bundle, oracle_valid_region
        bundle = load_bundle(args.scene)
        res = oracle_valid_region(bundle, args.resolution, theta=args.theta)
        Path(args.out).write_text(json.dumps({
            "resolution": res["resolution"], "theta": res["theta"],
            "coords": res["coords"].tolist(),
            "valid": np.asarray(res["valid"]).astype(int).tolist(),
            "agreement": res["agreement"].tolist(),
            "true_point": np.asarray(res["true_point"]).tolist(),
            "relevant_pixels": res["relevant_pixels"]}, indent=2))
        print(f"wrote oracle grid to {args.out}")
        return 0

    if cmd == "eval":
        from .evalbench import best_of_n_eval
        from .scenegen import load_bundle
        from .trainer import load_checkpoint
        ck = load_checkpoint(args.ckpt)
        bundle = load_bundle(args.scene)
        report = best_of_n_eval(ck, bundle, args.samples,
                                views_per_config=args.views_per_config,
                                seed=args.seed)
        Path(args.out).write_text(json.dumps(report.as_dict(), indent=2))
        print(f"wrote evaluation report to {args.out}")
        return 0

    if cmd == "bench":
        from .evalbench import bench_soft_z
        from .scenegen import load_bundle
        from .trainer import load_checkpoint
        ck = load_checkpoint(args.ckpt)
        bundle = load_bundle(args.scene)
        sweep = tuple(int(v) for v in args.sweep.split(","))
        table = bench_soft_z(ck, bundle, ray_count=args.rays, h_sweep=sweep,
                             repeats=args.repeats)
        out = Path(args.out)
        if out.suffix == ".csv":
            lines = ["h,composite_queries,softz_queries,query_ratio,"
                     "composite_s,softz_s,speedup,label_agreement"]
            for r in table["rows"]:
                lines.append(",".join(str(r[k]) for k in (
                    "h", "composite_queries", "softz_queries", "query_ratio",
                    "composite_s", "softz_s", "speedup", "label_agreement")))
            out.write_text("\n".join(lines) + "\n")
        else:
            out.write_text(json.dumps(table, indent=2))
        print(f"wrote benchmark table to {args.out}")
        return 0

    if cmd == "serve":
        import torch
        import uvicorn
        from .server import make_state_from_paths, make_app
        if args.deterministic:
            torch.set_num_threads(1)
        state = make_state_from_paths(args.ckpt, args.scene, ui_dir=args.ui)
        app = make_app(state)
        uvicorn.run(app, host="127.0.0.1", port=args.port, log_level="warning")
        return 0

    raise UserError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return run(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
