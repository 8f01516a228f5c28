"""Command-line entry point: synth, train, render, interpolate, eval."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import configure_threads
from .errors import MissingFileError, Retime4DError

log = logging.getLogger("retime4d")


def cameras_path_for(ckpt) -> Path:
    p = Path(ckpt)
    return p.with_name(p.stem + ".cameras.json")


def _load_cameras(args):
    from .io import read_cameras

    path = Path(args.cameras) if args.cameras else cameras_path_for(args.ckpt)
    if not path.is_file():
        raise MissingFileError(path, "camera file not found (pass --cameras)")
    return read_cameras(path)


def _pick_camera(cams, index: int):
    from .errors import ContractViolation

    if not 0 <= index < len(cams):
        raise ContractViolation(f"camera {index} does not exist ({len(cams)} cameras)")
    return cams[index]


def cmd_synth(args):
    from .synth import SceneScript, generate, standard_suite

    if args.standard:
        by_name = {s.name: s for s in standard_suite()}
        if args.standard not in by_name:
            raise MissingFileError(args.standard, f"no standard scene named this; choose from {sorted(by_name)}")
        script = by_name[args.standard]
    elif args.script:
        script = SceneScript.from_toml(args.script)
    else:
        raise SystemExit("synth needs --script or --standard")
    out = generate(script, args.out, stride=args.stride)
    print(f"wrote {out}")


def cmd_train(args):
    from .ingest import init_scene, load_bundle
    from .io import save_checkpoint, write_cameras
    from .scene import TimeGrid
    from .train import TrainConfig, train

    overrides = {"seed": args.seed, "budget": args.budget}
    cfg = TrainConfig.from_toml(args.config, **overrides)
    if args.iters is not None:
        cfg = cfg.scaled(args.iters)
    bundle, cams, clouds = load_bundle(args.data)
    scene = init_scene(clouds, cams, bundle, cfg.budget, TimeGrid(bundle.frame_count), seed=cfg.seed,
                       use_flow=cfg.flow_init)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    res = train(scene, bundle, cams, cfg,
                loss_csv=out.with_name(out.stem + ".loss.csv"),
                event_csv=out.with_name(out.stem + ".events.csv"))
    save_checkpoint(res.scene, out)
    write_cameras(cameras_path_for(out), cams)
    last = res.history[-1]["total"] if res.history else float("nan")
    print(f"wrote {out} ({len(res.scene)} primitives, final loss {last:.5f})")


def cmd_render(args):
    from .evaluate import render_image
    from .io import load_checkpoint, write_png

    scene = load_checkpoint(args.ckpt)
    cam = _pick_camera(_load_cameras(args), args.camera)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_png(args.out, render_image(scene, cam, args.time))
    print(f"wrote {args.out}")


def cmd_interpolate(args):
    from .evaluate import interpolate
    from .io import load_checkpoint

    scene = load_checkpoint(args.ckpt)
    cam = _pick_camera(_load_cameras(args), args.camera)
    paths = interpolate(scene, cam, args.t_from, args.t_to, args.frames, args.out)
    print(f"wrote {len(paths)} frames to {args.out}")


def cmd_eval(args):
    from .evaluate import evaluate
    from .io import load_checkpoint

    scene = load_checkpoint(args.ckpt)
    heat = args.heatmaps or str(Path(args.out).with_suffix("")) + "_heatmaps"
    report = evaluate(scene, args.data, args.split, out_csv=args.out, heatmap_dir=heat,
                      masked=not args.no_mask)
    print(f"{args.split}: PSNR {report.mean_psnr:.2f} dB, SSIM {report.mean_ssim:.4f} "
          f"over {len(report.rows)} images; wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="retime4d", description="4D Gaussian splatting for frame interpolation")
    p.add_argument("--seed", type=int, default=None, help="random seed (train default: config seed)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    s.add_argument("--script", help="scene script TOML")
    s.add_argument("--standard", help="name of a built-in scene instead of --script")
    s.add_argument("--out", required=True)
    s.add_argument("--stride", type=int, default=None, help="keep every n-th frame for training")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="initialize and train a scene")
    t.add_argument("--data", required=True, help="dataset root or train split directory")
    t.add_argument("--config", default=None, help="TOML with TrainConfig keys")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--seed", type=int, default=None, dest="sub_seed")
    t.add_argument("--iters", type=int, default=None, help="total iterations; cadences rescale")
    t.add_argument("--budget", type=int, default=None, help="primitive count")
    t.set_defaults(func=cmd_train)

    for name, fn, hlp in (("render", cmd_render, "render one image"),
                          ("interpolate", cmd_interpolate, "render uniformly spaced frames")):
        r = sub.add_parser(name, help=hlp)
        r.add_argument("--ckpt", required=True)
        r.add_argument("--camera", type=int, required=True)
        r.add_argument("--cameras", default=None, help="cameras.json (default: next to the checkpoint)")
        r.add_argument("--out", required=True)
        r.add_argument("--seed", type=int, default=None, dest="sub_seed")
        if name == "render":
            r.add_argument("--time", type=float, required=True)
        else:
            r.add_argument("--from", type=float, required=True, dest="t_from")
            r.add_argument("--to", type=float, required=True, dest="t_to")
            r.add_argument("--frames", type=int, required=True)
        r.set_defaults(func=fn)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="heldout", choices=("heldout", "train"))
    e.add_argument("--out", required=True, help="CSV report path")
    e.add_argument("--heatmaps", default=None, help="directory for |diff| PNGs")
    e.add_argument("--no-mask", action="store_true", help="score whole images instead of foreground")
    e.add_argument("--seed", type=int, default=None, dest="sub_seed")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    sub_seed = getattr(args, "sub_seed", None)
    args.seed = sub_seed if sub_seed is not None else args.seed
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_threads()
    try:
        args.func(args)
    except Retime4DError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
