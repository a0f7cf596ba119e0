"""Dataset container and file I/O: manifest JSON, PNG/PPM, TUM, match files.

All writes go through an atomic temp-file-and-rename so failed commands never
leave partial outputs behind.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .camera import Intrinsics, RsFrame
from .field import Aabb
from .lie import Pose, quat_to_rotation, rotation_to_quat


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    """8-bit image writer; PNG via Pillow with a PPM fallback by extension."""
    path = Path(path)
    u8 = to_u8(img)
    if path.suffix.lower() == ".ppm":
        header = f"P6\n{u8.shape[1]} {u8.shape[0]}\n255\n".encode("ascii")
        atomic_write_bytes(path, header + u8.tobytes())
        return
    import io as _io

    from PIL import Image

    buf = _io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        data = path.read_bytes()
        parts = data.split(b"\n", 3)
        if parts[0] != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        w, h = (int(x) for x in parts[1].split())
        u8 = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    else:
        from PIL import Image

        u8 = np.asarray(Image.open(path).convert("RGB"))
    return u8.astype(float) / 255.0


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def write_tum(path, poses: list[tuple[int, Pose]]) -> None:
    """TUM trajectory: 'timestamp tx ty tz qx qy qz qw' per line."""
    lines = []
    for fid, pose in poses:
        q = rotation_to_quat(pose.R)
        vals = [float(fid), *pose.t.tolist(), *q.tolist()]
        lines.append(" ".join(_fmt(v) for v in vals))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_tum(path) -> list[tuple[int, Pose]]:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 8:
            raise ValueError(f"{path}: bad TUM line: {line!r}")
        ts, tx, ty, tz, qx, qy, qz, qw = vals
        out.append((int(round(ts)), Pose(quat_to_rotation([qx, qy, qz, qw]), [tx, ty, tz])))
    return out


def write_matches(path, matches: dict) -> None:
    """One record per line: frame_i frame_j col_i row_i col_j row_j."""
    lines = []
    for (i, j) in sorted(matches.keys()):
        for rec in np.asarray(matches[(i, j)], dtype=float):
            lines.append(f"{i} {j} " + " ".join(_fmt(v) for v in rec))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_matches(path) -> dict:
    rows = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{path}: bad match line: {line!r}")
        i, j = int(parts[0]), int(parts[1])
        rows.setdefault((i, j), []).append([float(v) for v in parts[2:]])
    return {key: np.array(vals) for key, vals in rows.items()}


@dataclass
class Dataset:
    """Images, intrinsics, trajectories, correspondences, and scene bounds."""

    intr: Intrinsics
    frames_gt: list          # RsFrame with ground-truth pose0/v/omega, capture order
    frames_init: list        # RsFrame with noisy pose0 and zero velocities
    images_rs: np.ndarray    # [F, H, W, 3] training images
    images_gs: np.ndarray    # [F, H, W, 3] rectification targets
    aabb: Aabb
    near: float
    far: float
    background: np.ndarray
    matches: dict            # (i, j) -> [m, 4]
    order: list              # shuffled presentation order of frame ids

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=float).reshape(3)

    @property
    def n_frames(self) -> int:
        return len(self.frames_gt)

    def inverse_order(self) -> list:
        inv = [0] * len(self.order)
        for pos, fid in enumerate(self.order):
            inv[fid] = pos
        return inv


def _pose_json(pose: Pose) -> dict:
    return {"R": pose.R.tolist(), "t": pose.t.tolist()}


def _pose_from_json(d) -> Pose:
    return Pose(np.array(d["R"]), np.array(d["t"]))


def write_dataset(out_dir, ds: Dataset, image_format: str = "png") -> Path:
    """Write images, manifest, match file, and GT/initial TUM trajectories."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)

    frame_entries = []
    for fid in ds.order:
        gt = ds.frames_gt[fid]
        init = ds.frames_init[fid]
        rs_name = f"images/frame_{fid:04d}_rs.{image_format}"
        gs_name = f"images/frame_{fid:04d}_gs.{image_format}"
        write_image(out / rs_name, ds.images_rs[fid])
        write_image(out / gs_name, ds.images_gs[fid])
        frame_entries.append({
            "id": fid,
            "image_rs": rs_name,
            "image_gs": gs_name,
            "pose0_gt": _pose_json(gt.pose0),
            "v_gt": gt.v.tolist(),
            "omega_gt": gt.omega.tolist(),
            "pose0_init": _pose_json(init.pose0),
        })

    write_matches(out / "matches.txt", ds.matches)
    write_tum(out / "traj_gt.tum", [(f.frame_id, f.pose0) for f in ds.frames_gt])
    write_tum(out / "traj_init.tum", [(f.frame_id, f.pose0) for f in ds.frames_init])

    manifest = {
        "intrinsics": {
            "fx": ds.intr.fx, "fy": ds.intr.fy, "cx": ds.intr.cx, "cy": ds.intr.cy,
            "width": ds.intr.width, "height": ds.intr.height, "readout": ds.intr.readout,
        },
        "aabb": {"min": ds.aabb.bmin.tolist(), "max": ds.aabb.bmax.tolist()},
        "near": ds.near,
        "far": ds.far,
        "background": ds.background.tolist(),
        "match_file": "matches.txt",
        "shuffle": list(ds.order),
        "frames": frame_entries,
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return out / "manifest.json"


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    m = json.loads(manifest_path.read_text())
    ic = m["intrinsics"]
    intr = Intrinsics(fx=ic["fx"], fy=ic["fy"], cx=ic["cx"], cy=ic["cy"],
                      width=int(ic["width"]), height=int(ic["height"]),
                      readout=ic["readout"])

    entries = sorted(m["frames"], key=lambda e: e["id"])
    frames_gt, frames_init = [], []
    images_rs, images_gs = [], []
    for e in entries:
        fid = int(e["id"])
        frames_gt.append(RsFrame(fid, _pose_from_json(e["pose0_gt"]),
                                 np.array(e["v_gt"]), np.array(e["omega_gt"])))
        frames_init.append(RsFrame(fid, _pose_from_json(e["pose0_init"])))
        images_rs.append(read_image(root / e["image_rs"]))
        images_gs.append(read_image(root / e["image_gs"]))

    return Dataset(
        intr=intr,
        frames_gt=frames_gt,
        frames_init=frames_init,
        images_rs=np.stack(images_rs),
        images_gs=np.stack(images_gs),
        aabb=Aabb(np.array(m["aabb"]["min"]), np.array(m["aabb"]["max"])),
        near=float(m["near"]),
        far=float(m["far"]),
        background=np.array(m["background"]),
        matches=read_matches(root / m["match_file"]),
        order=[int(i) for i in m["shuffle"]],
    )


def worker_count() -> int:
    """Worker cap from URSBA_THREADS, defaulting to the CPU count."""
    n = os.cpu_count() or 1
    env = os.environ.get("URSBA_THREADS")
    if env:
        try:
            n = max(1, min(n, int(env)))
        except ValueError:
            raise ValueError(f"URSBA_THREADS must be an integer, got {env!r}")
    return n
