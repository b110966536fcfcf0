"""Dataset layout I/O: PNG frames, TUM trajectories, frame index, class map.

Layout produced by the simulator and consumed by the pipeline:
    intensity/%06d.png   8-bit grayscale
    depth/%06d.png       16-bit, millimetres, 0 invalid
    mask/%06d.png        16-bit instance ids, 0 background
    imu.csv              timestamp_ns,gx,gy,gz,ax,ay,az
    calib.txt            intrinsics + camera-IMU extrinsic
    frames.csv           frame_id,timestamp_ns
    classmap.txt         instance_id class_id:prob [class_id:prob ...]
    groundtruth_cam.txt / groundtruth_obj_<id>.txt   TUM format
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .imu import ImuMeasurement, load_imu_csv
from .manifold import CameraIntrinsics, Pose, Quaternion, load_calibration


class DatasetError(RuntimeError):
    """Raised for missing or inconsistent dataset files."""


# -- images -----------------------------------------------------------------


def write_gray8(path, img01: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img01) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_gray8(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def write_depth16(path, depth_m: np.ndarray) -> None:
    mm = np.clip(np.round(np.asarray(depth_m) * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def read_depth16(path) -> np.ndarray:
    mm = np.asarray(Image.open(path)).astype(np.float64)
    return mm / 1000.0


def write_mask16(path, ids: np.ndarray) -> None:
    Image.fromarray(np.asarray(ids).astype(np.uint16)).save(path)


def read_mask16(path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.int32)


# -- TUM trajectories ---------------------------------------------------------


def write_tum(path, rows) -> None:
    """rows: iterable of (timestamp_seconds, Pose). Quaternion written x y z w."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t, pose in rows:
            q = pose.q
            f.write(f"{t:.9f} {pose.t[0]:.9f} {pose.t[1]:.9f} {pose.t[2]:.9f} "
                    f"{q.x:.9f} {q.y:.9f} {q.z:.9f} {q.w:.9f}\n")


def read_tum(path):
    """Returns (timestamps (N,) seconds, list of Pose)."""
    times = []
    poses = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            p = [float(x) for x in line.split()]
            if len(p) != 8:
                raise DatasetError(f"bad TUM line in {path}: {line!r}")
            times.append(p[0])
            poses.append(Pose(Quaternion(p[7], p[4], p[5], p[6]).normalized(),
                              np.array(p[1:4])))
    return np.array(times), poses


# -- index / classmap ---------------------------------------------------------


def write_frames_csv(path, ids_and_stamps) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("frame_id,timestamp_ns\n")
        for i, t_ns in ids_and_stamps:
            f.write(f"{i},{t_ns}\n")


def read_frames_csv(path):
    out = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "frame_id,timestamp_ns":
            raise DatasetError(f"unexpected frames.csv header {header!r}")
        for line in f:
            line = line.strip()
            if line:
                a, b = line.split(",")
                out.append((int(a), int(b)))
    return out


def write_classmap(path, mapping: dict[int, dict[int, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for inst in sorted(mapping):
            probs = " ".join(f"{c}:{p:.6f}" for c, p in sorted(mapping[inst].items()))
            f.write(f"{inst} {probs}\n")


def read_classmap(path) -> dict[int, dict[int, float]]:
    out: dict[int, dict[int, float]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            inst = int(parts[0])
            out[inst] = {}
            for tok in parts[1:]:
                c, p = tok.split(":")
                out[inst][int(c)] = float(p)
    return out


# -- dataset handle -----------------------------------------------------------


@dataclass
class FrameRecord:
    index: int
    t_ns: int
    intensity_path: str
    depth_path: str
    mask_path: str


class Dataset:
    """Read-only view over a dataset directory."""

    def __init__(self, root):
        self.root = str(root)
        frames_csv = os.path.join(self.root, "frames.csv")
        if not os.path.exists(frames_csv):
            raise DatasetError(f"{frames_csv} not found")
        self.frames: list[FrameRecord] = []
        for i, t_ns in read_frames_csv(frames_csv):
            rec = FrameRecord(
                i, t_ns,
                os.path.join(self.root, "intensity", f"{i:06d}.png"),
                os.path.join(self.root, "depth", f"{i:06d}.png"),
                os.path.join(self.root, "mask", f"{i:06d}.png"),
            )
            for p in (rec.intensity_path, rec.depth_path, rec.mask_path):
                if not os.path.exists(p):
                    raise DatasetError(f"missing frame file {p}")
            self.frames.append(rec)
        if not self.frames:
            raise DatasetError("dataset has no frames")
        self.K, self.T_SC = load_calibration(os.path.join(self.root, "calib.txt"))
        self.imu: list[ImuMeasurement] = load_imu_csv(os.path.join(self.root, "imu.csv"))
        cm = os.path.join(self.root, "classmap.txt")
        self.classmap = read_classmap(cm) if os.path.exists(cm) else {}

    def __len__(self) -> int:
        return len(self.frames)

    def load_frame(self, i: int):
        """(t_ns, intensity [0,1], depth m, instance mask int32)."""
        rec = self.frames[i]
        return rec.t_ns, read_gray8(rec.intensity_path), read_depth16(rec.depth_path), read_mask16(rec.mask_path)

    def groundtruth_camera(self):
        return read_tum(os.path.join(self.root, "groundtruth_cam.txt"))

    def groundtruth_object(self, instance_id: int):
        return read_tum(os.path.join(self.root, f"groundtruth_obj_{instance_id}.txt"))
