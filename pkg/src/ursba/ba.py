"""Coarse-to-fine photometric bundle adjustment over rolling-shutter frames.

One training step renders a random batch of (frame, pixel) rays under the
row-pose model, takes the mean-squared color residual against the captured
images, and feeds exact reverse-mode gradients to per-group Adam updates:
field mipmaps/MLP as plain parameters, per-frame pose as a left-multiplied
twist increment applied on the SE(3) manifold, and per-frame velocities as
plain vectors.

Stages run in series: coarse (box-downsampled images, enlarged pixel
footprint), epipolar outlier detection + pose correction, then fine training
on full-resolution images with the field optimizer state re-initialized.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from .camera import Intrinsics, RsFrame
from .epipolar import build_scene_graph, classify_outlier_poses, correct_poses
from .field import Aabb, RadianceField
from .io import Dataset, atomic_write_bytes, atomic_write_text, write_tum
from .lie import Pose, Twist, se3_exp
from .optim import DEFAULT_GROUP_LRS, LrSchedule, ParamGroup, adam_step, lr_at
from .renderer import RenderConfig, render_backward, render_image, render_rays

CHECKPOINT_MAGIC = b"URSF"
CHECKPOINT_EXT_MAGIC = b"URSX"
CHECKPOINT_VERSION = 1

STAGES = ("init", "coarse", "correct", "fine", "done")


@dataclass
class TrainConfig:
    coarse_steps: int = 2000
    fine_steps: int = 3000
    coarse_downsample: int = 4
    rays_per_step: int = 4096
    n_samples: int = 64
    seed: int = 0
    base_res: int = 64
    channels: int = 8
    n_levels: int = 4
    hidden: int = 64
    n_freqs: int = 4
    lrs: dict = dc_field(default_factory=lambda: dict(DEFAULT_GROUP_LRS))
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    delta_th: float = 1e-3
    ratio_th: float = 0.5
    min_matches: int = 30
    top_k: int = 4
    correction_enabled: bool = True
    optimize_poses: bool = True
    estimate_velocities: bool = True
    log_every: int = 50

    def __post_init__(self):
        if self.coarse_steps < 0 or self.fine_steps < 0:
            raise ValueError("step counts must be non-negative")
        ds = self.coarse_downsample
        if ds < 1 or (ds & (ds - 1)) != 0:
            raise ValueError("coarse_downsample must be a power-of-two >= 1")

    @staticmethod
    def paper_scale() -> "TrainConfig":
        """Full-scale preset: 10K coarse + 15K fine iterations."""
        return TrainConfig(coarse_steps=10000, fine_steps=15000)


@dataclass
class RayBatch:
    fi: np.ndarray           # per-ray frame index
    px: np.ndarray           # full-resolution pixel x (fractional allowed)
    py: np.ndarray           # full-resolution pixel y
    target: np.ndarray       # [n, 3] target colors
    footprint_scale: float = 1.0


@dataclass
class SceneState:
    field: RadianceField
    frames: list
    groups: dict
    intr: Intrinsics
    near: float
    far: float
    background: np.ndarray
    cfg: TrainConfig
    rng: np.random.Generator
    stage: str = "init"
    stage_step: int = 0
    global_step: int = 0

    def render_config(self, stratified: bool) -> RenderConfig:
        return RenderConfig(near=self.near, far=self.far, n_samples=self.cfg.n_samples,
                            background=self.background, stratified=stratified)

    def frames_by_id(self) -> dict:
        return {f.frame_id: f for f in self.frames}

    def _advance_stage(self, new_stage: str) -> None:
        if STAGES.index(new_stage) < STAGES.index(self.stage):
            raise RuntimeError(f"stage may not go back from {self.stage} to {new_stage}")
        if new_stage != self.stage:
            self.stage = new_stage
            self.stage_step = 0


def build_state(dataset: Dataset, cfg: TrainConfig) -> SceneState:
    field_rng = np.random.default_rng([cfg.seed, 17])
    train_rng = np.random.default_rng([cfg.seed, 43])
    field = RadianceField(dataset.aabb, base_res=cfg.base_res, channels=cfg.channels,
                          n_levels=cfg.n_levels, hidden=cfg.hidden, n_freqs=cfg.n_freqs,
                          rng=field_rng)
    frames = [f.copy() for f in dataset.frames_init]
    n = len(frames)
    groups = {
        "mipmaps": ParamGroup("mipmaps", {"base": field.mipmaps.base},
                              cfg.lrs["mipmaps"], cfg.beta1, cfg.beta2, cfg.eps),
        "mlp": ParamGroup("mlp", field.mlp.params(),
                          cfg.lrs["mlp"], cfg.beta1, cfg.beta2, cfg.eps),
        "pose": ParamGroup("pose", {"twist": np.zeros((n, 6))},
                           cfg.lrs["pose"], cfg.beta1, cfg.beta2, cfg.eps),
        "velocity": ParamGroup("velocity",
                               {"v": np.stack([f.v for f in frames]),
                                "omega": np.stack([f.omega for f in frames])},
                               cfg.lrs["velocity"], cfg.beta1, cfg.beta2, cfg.eps),
    }
    return SceneState(field=field, frames=frames, groups=groups, intr=dataset.intr,
                      near=dataset.near, far=dataset.far, background=dataset.background,
                      cfg=cfg, rng=train_rng)


def photometric_loss(state: SceneState, batch: RayBatch,
                     rng: np.random.Generator | None = None):
    """Mean squared color residual over the batch plus all group gradients."""
    rcfg = state.render_config(stratified=rng is not None)
    color, record = render_rays(
        state.field, state.frames, batch.fi, batch.px, batch.py, state.intr, rcfg,
        rng=rng, footprint_scale=batch.footprint_scale, want_record=True,
    )
    resid = color - batch.target
    loss = float(np.mean(resid ** 2))
    dcolor = 2.0 * resid / resid.size
    grads = render_backward(record, dcolor)
    return loss, grads


def _apply_step(state: SceneState, grads, lrs: dict) -> None:
    cfg = state.cfg
    g = state.groups

    adam_step(g["mipmaps"], {"base": grads.base}, lrs["mipmaps"])
    state.field.mipmaps.base = g["mipmaps"].params["base"]
    state.field.mipmaps.refresh()

    adam_step(g["mlp"], grads.mlp, lrs["mlp"])
    state.field.mlp.set_params(g["mlp"].params)

    if cfg.optimize_poses:
        # pose parameters are per-step twist increments: the group's virtual
        # parameter starts at zero, Adam turns the tangent gradient into a
        # delta, and the delta is applied by left multiplication
        g["pose"].params["twist"] = np.zeros_like(g["pose"].params["twist"])
        adam_step(g["pose"], {"twist": grads.twist}, lrs["pose"])
        delta = g["pose"].params["twist"]
        for k, frame in enumerate(state.frames):
            frame.pose0 = se3_exp(Twist.from_vector(delta[k])).compose(frame.pose0)

    if cfg.estimate_velocities:
        adam_step(g["velocity"], {"v": grads.v, "omega": grads.omega}, lrs["velocity"])
        for k, frame in enumerate(state.frames):
            frame.v = g["velocity"].params["v"][k].copy()
            frame.omega = g["velocity"].params["omega"][k].copy()


def downsample_images(images: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter downsample of [F, H, W, 3] images."""
    if factor == 1:
        return images
    f, h, w, c = images.shape
    if h % factor or w % factor:
        raise ValueError("image size must be divisible by the downsample factor")
    return images.reshape(f, h // factor, factor, w // factor, factor, c).mean(axis=(2, 4))


def _run_stage(state: SceneState, images: np.ndarray, n_steps: int,
               footprint_scale: float, log_lines: list, stop_after: int | None) -> bool:
    """Shared training loop; returns False if stopped early by stop_after."""
    cfg = state.cfg
    n_frames, hs, ws = images.shape[0], images.shape[1], images.shape[2]
    if n_steps <= 0:
        return True
    schedule = LrSchedule(n_steps)
    while state.stage_step < n_steps:
        if stop_after is not None and state.global_step >= stop_after:
            return False
        step = state.stage_step
        fi = state.rng.integers(0, n_frames, cfg.rays_per_step)
        pix = state.rng.integers(0, hs * ws, cfg.rays_per_step)
        pyd, pxd = np.divmod(pix, ws)
        batch = RayBatch(
            fi=fi,
            px=(pxd + 0.5) * footprint_scale - 0.5,
            py=(pyd + 0.5) * footprint_scale - 0.5,
            target=images[fi, pyd, pxd],
            footprint_scale=footprint_scale,
        )
        loss, grads = photometric_loss(state, batch, rng=state.rng)
        lrs = {name: lr_at(schedule, grp.base_lr, step) for name, grp in state.groups.items()}
        _apply_step(state, grads, lrs)
        state.stage_step += 1
        state.global_step += 1
        if step % cfg.log_every == 0 or state.stage_step == n_steps:
            log_lines.append(
                f"step {state.global_step:6d} stage {state.stage:7s} "
                f"loss {loss:.10e} "
                f"lr_mipmaps {lrs['mipmaps']:.8e} lr_mlp {lrs['mlp']:.8e} "
                f"lr_pose {lrs['pose']:.8e} lr_velocity {lrs['velocity']:.8e}"
            )
    return True


def run_coarse(state: SceneState, dataset: Dataset, cfg: TrainConfig,
               log_lines: list | None = None, stop_after: int | None = None) -> bool:
    """Train on box-downsampled images with footprint scaled to match."""
    if state.stage not in ("init", "coarse"):
        raise RuntimeError(f"coarse stage cannot run from stage {state.stage!r}")
    state._advance_stage("coarse")
    images = downsample_images(dataset.images_rs, cfg.coarse_downsample)
    return _run_stage(state, images, cfg.coarse_steps, float(cfg.coarse_downsample),
                      log_lines if log_lines is not None else [], stop_after)


def detect_and_correct(state: SceneState, matches: dict, cfg: TrainConfig) -> dict:
    """Flag erroneous poses via epipolar verification and replace them."""
    if state.stage != "coarse":
        raise RuntimeError(f"correction must follow the coarse stage, not {state.stage!r}")
    counts = {key: len(rec) for key, rec in matches.items()}
    graph = build_scene_graph(counts, cfg.min_matches,
                              nodes=[f.frame_id for f in state.frames])
    frames_dict = state.frames_by_id()
    verdicts = classify_outlier_poses(graph, frames_dict, matches, state.intr,
                                      delta_th=cfg.delta_th, ratio_th=cfg.ratio_th,
                                      top_k=cfg.top_k)
    corrected, uncorrected = correct_poses(verdicts, graph, frames_dict)
    id_to_idx = {f.frame_id: k for k, f in enumerate(state.frames)}
    flagged = sorted(v.frame_id for v in verdicts if v.flagged)
    vel = state.groups["velocity"]
    pose = state.groups["pose"]
    for fid in flagged:
        if fid in uncorrected:
            continue
        k = id_to_idx[fid]
        state.frames[k] = corrected[fid]
        vel.params["v"][k] = corrected[fid].v
        vel.params["omega"][k] = corrected[fid].omega
        # moment history refers to the discarded pose; drop it
        for st in (pose.state, vel.state):
            for key in st.m:
                st.m[key][k] = 0.0
                st.v[key][k] = 0.0
    state._advance_stage("correct")
    return {
        "flagged": flagged,
        "uncorrected": sorted(uncorrected),
        "unverifiable": sorted(v.frame_id for v in verdicts if not v.verifiable),
        "inlier_ratio": {str(v.frame_id): v.inlier_ratio for v in verdicts if v.verifiable},
    }


def run_fine(state: SceneState, dataset: Dataset, cfg: TrainConfig,
             log_lines: list | None = None, stop_after: int | None = None) -> bool:
    """Full-resolution refinement with field optimizer state re-initialized."""
    if state.stage not in ("coarse", "correct", "fine"):
        raise RuntimeError(f"fine stage cannot run from stage {state.stage!r}")
    if state.stage != "fine":
        state.groups["mipmaps"].reset_state()
        state.groups["mlp"].reset_state()
        state._advance_stage("fine")
    done = _run_stage(state, dataset.images_rs, cfg.fine_steps, 1.0,
                      log_lines if log_lines is not None else [], stop_after)
    if done:
        state._advance_stage("done")
    return done


def train(dataset: Dataset, cfg: TrainConfig, out_dir,
          resume_from=None, stop_after: int | None = None) -> SceneState:
    """Full pipeline: coarse -> detect/correct -> fine, with outputs on disk.

    Writes checkpoint.ursf, traj_est.tum, correction_report.json and train.log
    into out_dir. stop_after pauses after that many global steps (the saved
    checkpoint can be resumed bitwise); resume_from restores a paused run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state, log_lines, report = load_checkpoint(resume_from, cfg)
    else:
        state = build_state(dataset, cfg)
        log_lines, report = [], None

    finished = True
    if state.stage in ("init", "coarse"):
        finished = run_coarse(state, dataset, cfg, log_lines, stop_after)
    if finished and cfg.correction_enabled and state.stage == "coarse" and dataset.matches:
        report = detect_and_correct(state, dataset.matches, cfg)
    if finished and state.stage in ("coarse", "correct", "fine"):
        run_fine(state, dataset, cfg, log_lines, stop_after)

    save_checkpoint(out / "checkpoint.ursf", state, log_lines, report)
    write_tum(out / "traj_est.tum", [(f.frame_id, f.pose0) for f in state.frames])
    atomic_write_text(out / "train.log", "\n".join(log_lines) + ("\n" if log_lines else ""))
    atomic_write_text(out / "correction_report.json",
                      json.dumps(report if report is not None else {}, indent=2, sort_keys=True) + "\n")
    return state


def render_training_view(state: SceneState, frame_id: int, mode: str = "gs") -> np.ndarray:
    frames = {f.frame_id: f for f in state.frames}
    if frame_id not in frames:
        raise KeyError(f"unknown frame id {frame_id}")
    return render_image(state.field, frames[frame_id], state.intr,
                        state.render_config(stratified=False), mode=mode)


# ---------------------------------------------------------------------------
# checkpoint format: little-endian; magic, version, dims, then raw f32
# parameter blocks in declaration order (mipmap base, then MLP W1 b1 W2 b2 W3
# b3). An extension section follows with a JSON header and raw f64 blocks
# carrying the exact training state for bitwise resume.
# ---------------------------------------------------------------------------


def _f32_blocks(state: SceneState) -> list[np.ndarray]:
    mlp = state.field.mlp
    return [state.field.mipmaps.base, mlp.W1, mlp.b1, mlp.W2, mlp.b2, mlp.W3, mlp.b3]


def save_checkpoint(path, state: SceneState, log_lines=None, report=None) -> None:
    field = state.field
    mm = field.mipmaps
    head = struct.pack(
        "<4sI6I", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
        3, mm.base_res, mm.channels, mm.n_levels, field.mlp.in_dim, field.mlp.hidden,
    )
    payload = [head]
    for arr in _f32_blocks(state):
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    blocks: list[tuple[str, np.ndarray]] = []
    for name, arr in field.param_arrays().items():
        blocks.append((f"params/{name}", arr))
    blocks.append(("frames/R", np.stack([f.pose0.R for f in state.frames])))
    blocks.append(("frames/t", np.stack([f.pose0.t for f in state.frames])))
    blocks.append(("frames/v", np.stack([f.v for f in state.frames])))
    blocks.append(("frames/omega", np.stack([f.omega for f in state.frames])))
    for gname, grp in state.groups.items():
        for key in sorted(grp.params):
            blocks.append((f"adam/{gname}/{key}/m", grp.state.m[key]))
            blocks.append((f"adam/{gname}/{key}/v", grp.state.v[key]))

    rng_state = state.rng.bit_generator.state
    meta = {
        "version": CHECKPOINT_VERSION,
        "aabb": {"min": field.aabb.bmin.tolist(), "max": field.aabb.bmax.tolist()},
        "n_freqs": field.n_freqs,
        "near": state.near,
        "far": state.far,
        "background": state.background.tolist(),
        "intrinsics": {
            "fx": state.intr.fx, "fy": state.intr.fy, "cx": state.intr.cx,
            "cy": state.intr.cy, "width": state.intr.width,
            "height": state.intr.height, "readout": state.intr.readout,
        },
        "stage": state.stage,
        "stage_step": state.stage_step,
        "global_step": state.global_step,
        "frame_ids": [f.frame_id for f in state.frames],
        "rng": {
            "state": str(rng_state["state"]["state"]),
            "inc": str(rng_state["state"]["inc"]),
            "has_uint32": rng_state["has_uint32"],
            "uinteger": rng_state["uinteger"],
        },
        "group_steps": {name: grp.state.step for name, grp in state.groups.items()},
        "cfg": {
            "coarse_steps": state.cfg.coarse_steps, "fine_steps": state.cfg.fine_steps,
            "coarse_downsample": state.cfg.coarse_downsample,
            "rays_per_step": state.cfg.rays_per_step, "n_samples": state.cfg.n_samples,
            "seed": state.cfg.seed,
        },
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
        "log_lines": log_lines if log_lines is not None else [],
        "report": report,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload.append(CHECKPOINT_EXT_MAGIC)
    payload.append(struct.pack("<Q", len(meta_bytes)))
    payload.append(meta_bytes)
    for _, arr in blocks:
        payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(payload))


def load_checkpoint(path, cfg: TrainConfig):
    """Restore a SceneState (exact f64 state) from a checkpoint file."""
    data = Path(path).read_bytes()
    magic, version = struct.unpack_from("<4sI", data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    n_planes, base_res, channels, n_levels, in_dim, hidden = struct.unpack_from("<6I", data, 8)
    off = 8 + 24
    f32_shapes = [
        (n_planes, base_res, base_res, channels),
        (in_dim, hidden), (hidden,), (hidden, hidden), (hidden,), (hidden, 4), (4,),
    ]
    for shape in f32_shapes:
        off += int(np.prod(shape)) * 4

    if data[off:off + 4] != CHECKPOINT_EXT_MAGIC:
        raise ValueError(f"{path}: missing exact-state extension")
    off += 4
    (meta_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    meta = json.loads(data[off:off + meta_len].decode("utf-8"))
    off += meta_len

    arrays = {}
    for blk in meta["blocks"]:
        shape = tuple(blk["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[blk["name"]] = np.frombuffer(
            data, dtype="<f8", count=count, offset=off
        ).reshape(shape).copy()
        off += count * 8

    for key in ("coarse_steps", "fine_steps", "coarse_downsample",
                "rays_per_step", "n_samples", "seed"):
        if meta["cfg"][key] != getattr(cfg, key):
            raise ValueError(f"checkpoint/config mismatch on {key}")

    aabb = Aabb(np.array(meta["aabb"]["min"]), np.array(meta["aabb"]["max"]))
    field = RadianceField(aabb, base_res=base_res, channels=channels, n_levels=n_levels,
                          hidden=hidden, n_freqs=meta["n_freqs"], zero_init_mlp=True)
    field.mipmaps.base = arrays["params/mipmaps.base"]
    field.mlp.set_params({name: arrays[f"params/mlp.{name}"] for name in field.mlp.PARAM_NAMES})
    field.mipmaps.refresh()

    frames = []
    for k, fid in enumerate(meta["frame_ids"]):
        frames.append(RsFrame(int(fid), Pose(arrays["frames/R"][k], arrays["frames/t"][k]),
                              arrays["frames/v"][k], arrays["frames/omega"][k]))

    ic = meta["intrinsics"]
    intr = Intrinsics(fx=ic["fx"], fy=ic["fy"], cx=ic["cx"], cy=ic["cy"],
                      width=int(ic["width"]), height=int(ic["height"]), readout=ic["readout"])

    n = len(frames)
    groups = {
        "mipmaps": ParamGroup("mipmaps", {"base": field.mipmaps.base},
                              cfg.lrs["mipmaps"], cfg.beta1, cfg.beta2, cfg.eps),
        "mlp": ParamGroup("mlp", field.mlp.params(),
                          cfg.lrs["mlp"], cfg.beta1, cfg.beta2, cfg.eps),
        "pose": ParamGroup("pose", {"twist": np.zeros((n, 6))},
                           cfg.lrs["pose"], cfg.beta1, cfg.beta2, cfg.eps),
        "velocity": ParamGroup("velocity",
                               {"v": np.stack([f.v for f in frames]),
                                "omega": np.stack([f.omega for f in frames])},
                               cfg.lrs["velocity"], cfg.beta1, cfg.beta2, cfg.eps),
    }
    for gname, grp in groups.items():
        grp.state.step = meta["group_steps"][gname]
        for key in grp.params:
            grp.state.m[key] = arrays[f"adam/{gname}/{key}/m"]
            grp.state.v[key] = arrays[f"adam/{gname}/{key}/v"]

    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(meta["rng"]["state"]), "inc": int(meta["rng"]["inc"])},
        "has_uint32": meta["rng"]["has_uint32"],
        "uinteger": meta["rng"]["uinteger"],
    }

    state = SceneState(field=field, frames=frames, groups=groups, intr=intr,
                       near=meta["near"], far=meta["far"],
                       background=np.array(meta["background"]), cfg=cfg, rng=rng,
                       stage=meta["stage"], stage_step=meta["stage_step"],
                       global_step=meta["global_step"])
    return state, list(meta["log_lines"]), meta["report"]
