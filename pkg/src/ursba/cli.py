"""Command-line surface: synth / train / render / unroll / gen-rs / eval."""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import ba, evalmetrics, io, synth
from .renderer import render_image


def _cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    scene = synth.scene_preset(args.scene, np.random.default_rng([args.seed, 5]))
    traj = synth.trajectory_preset(args.traj, args.frames)
    aabb = synth.scene_aabb(args.scene)

    intr0 = synth.default_intrinsics(args.width, args.height)
    readout = args.readout
    if readout is None:
        readout = synth.readout_for_shear(
            traj, intr0.fx, args.height, synth.TRAJ_TARGET_SHEAR_PX[args.traj]
        )
    intr = synth.default_intrinsics(args.width, args.height, readout)

    near, far = args.near, args.far
    frames = traj.frames

    def _render(frame):
        return synth.render_pair(scene, frame, intr, near, far,
                                 n_samples=args.render_samples)

    with ThreadPoolExecutor(max_workers=io.worker_count()) as pool:
        pairs = list(pool.map(_render, frames))
    images_rs = np.stack([p[0] for p in pairs])
    images_gs = np.stack([p[1] for p in pairs])

    frames_init = synth.perturb_poses(frames, args.noise_trans, math.radians(args.noise_rot),
                                      np.random.default_rng([args.seed, 11]))
    for f in frames_init:
        f.v = np.zeros(3)
        f.omega = np.zeros(3)

    matches, _ = synth.generate_matches(
        scene, frames, intr, n_points=args.n_points, noise_px=args.noise_px,
        outlier_frac=args.outlier_frac, rng=np.random.default_rng([args.seed, 23]),
    )
    order = [int(i) for i in rng.permutation(len(frames))]

    ds = io.Dataset(intr=intr, frames_gt=frames, frames_init=frames_init,
                    images_rs=images_rs, images_gs=images_gs, aabb=aabb,
                    near=near, far=far, background=np.zeros(3),
                    matches=matches, order=order)
    manifest = io.write_dataset(args.out, ds)
    print(f"wrote {len(frames)} frame pairs to {manifest.parent}")
    return 0


def _load_train_config(path) -> ba.TrainConfig:
    if path is None:
        return ba.TrainConfig()
    overrides = json.loads(Path(path).read_text())
    cfg = ba.TrainConfig()
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown config key: {key!r}")
        setattr(cfg, key, value)
    cfg.__post_init__()
    return cfg


def _cmd_train(args) -> int:
    dataset = io.load_dataset(args.manifest)
    cfg = _load_train_config(args.config)
    state = ba.train(dataset, cfg, args.out, resume_from=args.resume,
                     stop_after=args.stop_after)
    print(f"training ended at stage {state.stage!r}, step {state.global_step}; "
          f"outputs in {args.out}")
    return 0


def _state_from_checkpoint(path):
    state, _, _ = ba.load_checkpoint(path, _checkpoint_cfg(path))
    return state


def _checkpoint_cfg(path) -> ba.TrainConfig:
    # rebuild a matching config from the checkpoint's embedded echo
    import struct as _struct

    data = Path(path).read_bytes()
    if data[:4] != ba.CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    n_planes, base_res, channels, n_levels, in_dim, hidden = _struct.unpack_from("<6I", data, 8)
    off = 32
    for shape in [(n_planes, base_res, base_res, channels), (in_dim, hidden), (hidden,),
                  (hidden, hidden), (hidden,), (hidden, 4), (4,)]:
        off += int(np.prod(shape)) * 4
    off += 4
    (meta_len,) = _struct.unpack_from("<Q", data, off)
    meta = json.loads(data[off + 8:off + 8 + meta_len].decode("utf-8"))
    cfg = ba.TrainConfig(**meta["cfg"])
    cfg.base_res, cfg.channels, cfg.n_levels, cfg.hidden = base_res, channels, n_levels, hidden
    cfg.n_freqs = meta["n_freqs"]
    return cfg


def _cmd_render(args, force_gs: bool = False) -> int:
    state = _state_from_checkpoint(args.checkpoint)
    frames = {f.frame_id: f for f in state.frames}
    if args.frame not in frames:
        raise KeyError(f"frame id {args.frame} not in checkpoint "
                       f"(have {sorted(frames)})")
    mode = "gs" if force_gs else args.mode
    img = render_image(state.field, frames[args.frame], state.intr,
                       state.render_config(stratified=False), mode=mode)
    io.write_image(args.out, img)
    print(f"wrote {args.out}")
    return 0


def _cmd_unroll(args) -> int:
    return _cmd_render(args, force_gs=True)


def _cmd_gen_rs(args) -> int:
    state = _state_from_checkpoint(args.checkpoint)
    scaled = synth.rescale_motion(state.frames, args.factor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = scaled if args.frame is None else [
        f for f in scaled if f.frame_id == args.frame
    ]
    if not frames:
        raise KeyError(f"frame id {args.frame} not in checkpoint")
    cfg = state.render_config(stratified=False)
    for f in frames:
        img = render_image(state.field, f, state.intr, cfg, mode="rs")
        name = out / f"frame_{f.frame_id:04d}_rs_x{args.factor:g}.png"
        io.write_image(name, img)
    print(f"wrote {len(frames)} images at motion factor {args.factor:g} to {out}")
    return 0


def _traj_from_tum(path) -> evalmetrics.Trajectory:
    return evalmetrics.Trajectory(io.read_tum(path))


def _cmd_eval(args) -> int:
    report = {}
    ate = evalmetrics.ate_rmse(_traj_from_tum(args.est), _traj_from_tum(args.gt))
    report["trans_rmse_m"] = ate.trans_rmse
    report["rot_rmse_deg"] = ate.rot_rmse_deg
    if args.render_dir and args.gt_dir:
        rdir, gdir = Path(args.render_dir), Path(args.gt_dir)
        names = sorted(p.name for p in rdir.iterdir() if p.suffix in (".png", ".ppm"))
        common = [n for n in names if (gdir / n).exists()]
        if not common:
            raise ValueError("no common image names between render and gt dirs")
        psnrs, ssims = [], []
        for n in common:
            a = io.read_image(rdir / n)
            b = io.read_image(gdir / n)
            psnrs.append(evalmetrics.psnr(a, b))
            ssims.append(evalmetrics.ssim(a, b))
        report["psnr_db"] = float(np.mean(psnrs))
        report["ssim"] = float(np.mean(ssims))
    io.atomic_write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ursba",
                                description="Rolling-shutter bundle adjustment for "
                                            "radiance fields from unordered images")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic RS/GS dataset")
    ps.add_argument("--scene", default="blobs", choices=["blobs", "bar"])
    ps.add_argument("--traj", default="medium", choices=["slow", "medium", "fast"])
    ps.add_argument("--frames", type=int, default=20)
    ps.add_argument("--width", type=int, default=64)
    ps.add_argument("--height", type=int, default=64)
    ps.add_argument("--readout", type=float, default=None,
                    help="seconds per row; default derives from the preset shear")
    ps.add_argument("--near", type=float, default=1.0)
    ps.add_argument("--far", type=float, default=4.5)
    ps.add_argument("--render-samples", type=int, default=160)
    ps.add_argument("--noise-trans", type=float, default=0.10, help="meters (std)")
    ps.add_argument("--noise-rot", type=float, default=1.15, help="degrees (std)")
    ps.add_argument("--n-points", type=int, default=300)
    ps.add_argument("--noise-px", type=float, default=0.5)
    ps.add_argument("--outlier-frac", type=float, default=0.05)
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=_cmd_synth)

    pt = sub.add_parser("train", help="run coarse-to-fine bundle adjustment")
    pt.add_argument("--manifest", required=True)
    pt.add_argument("--config", default=None, help="JSON with TrainConfig overrides")
    pt.add_argument("--out", required=True)
    pt.add_argument("--resume", default=None)
    pt.add_argument("--stop-after", type=int, default=None)
    pt.set_defaults(func=_cmd_train)

    for name, helptext, fn in (
        ("render", "render a training frame from a checkpoint", _cmd_render),
        ("unroll", "global-shutter rectification of a training frame", _cmd_unroll),
    ):
        pr = sub.add_parser(name, help=helptext)
        pr.add_argument("--checkpoint", required=True)
        pr.add_argument("--frame", type=int, required=True)
        if name == "render":
            pr.add_argument("--mode", choices=["gs", "rs"], default="gs")
        pr.add_argument("--out", required=True)
        pr.set_defaults(func=fn)

    pg = sub.add_parser("gen-rs", help="re-render training frames at scaled motion")
    pg.add_argument("--checkpoint", required=True)
    pg.add_argument("--factor", type=float, required=True)
    pg.add_argument("--frame", type=int, default=None)
    pg.add_argument("--out", required=True)
    pg.set_defaults(func=_cmd_gen_rs)

    pe = sub.add_parser("eval", help="trajectory and image metrics")
    pe.add_argument("--est", required=True)
    pe.add_argument("--gt", required=True)
    pe.add_argument("--render-dir", default=None)
    pe.add_argument("--gt-dir", default=None)
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=_cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # CLI boundary: fail with message + nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
