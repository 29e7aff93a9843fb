"""Data model and on-disk format for scan trajectories.

A dataset root contains one directory per scan plus a top-level `split.json`
mapping scan directory names to "train" or "val". Each scan directory holds:

    meta.json            subject_id, plane_annotations, image size, has_phase
    poses.csv            header `t,tx,ty,tz,rx,ry,rz,phase`, one row per frame,
                         floats written with 6 fractional digits
    frames/frame_%06d.png  8-bit grayscale; pixel/255 gives values in [0, 1]

The format is inspectable and language-neutral so real scans can be ingested
later by writing the same layout. Pose angle conventions are those of
`echoguide.pose` (intrinsic Z-Y-X Euler, degrees).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from echoguide.pose import Action, Pose, relative_action

PLANE_NAMES: dict[int, str] = {
    1: "PLAX",
    2: "PSAX-AV",
    3: "PSAX-PV",
    4: "PSAX-MV",
    5: "PSAX-PAP",
    6: "PSAX-APEX",
    7: "A4C",
    8: "A5C",
    9: "A3C",
    10: "A2C",
}
PLANE_IDS = tuple(sorted(PLANE_NAMES))

SPLIT_FILE = "split.json"
META_FILE = "meta.json"
POSES_FILE = "poses.csv"
FRAMES_DIR = "frames"
POSES_HEADER = "t,tx,ty,tz,rx,ry,rz,phase"


class DatasetError(Exception):
    """Raised when on-disk data violates the format or its invariants."""


def plane_name(g: int) -> str:
    if g not in PLANE_NAMES:
        raise ValueError(f"plane id must be in 1..10, got {g}")
    return PLANE_NAMES[g]


@dataclass(frozen=True)
class FrameRecord:
    """One scan frame: ordinal index, image in [0, 1], pose, cardiac phase."""

    index: int
    image: np.ndarray
    pose: Pose
    phase: float


class Trajectory:
    """One subject's ordered scan with its ten standard-plane annotations.

    Frames are stored as dense arrays (uint8 images, float64 poses) so that
    whole-scan operations stay vectorizable; per-frame access converts on the
    fly. Instances are immutable after construction.
    """

    def __init__(
        self,
        subject_id: str,
        images: np.ndarray,
        poses: np.ndarray,
        phases: np.ndarray,
        plane_annotations: dict[int, int],
        scan_name: str = "",
        has_phase: bool = True,
    ) -> None:
        images = np.asarray(images)
        if images.ndim != 3:
            raise DatasetError(f"images must be (T, H, W), got shape {images.shape}")
        if images.dtype != np.uint8:
            arr = np.asarray(images, dtype=np.float64)
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise DatasetError("float images must lie in [0, 1]")
            images = np.round(arr * 255.0).astype(np.uint8)
        poses = np.asarray(poses, dtype=np.float64)
        phases = np.asarray(phases, dtype=np.float64)
        n = images.shape[0]
        if poses.shape != (n, 6):
            raise DatasetError(f"poses must be ({n}, 6), got {poses.shape}")
        if phases.shape != (n,):
            raise DatasetError(f"phases must be ({n},), got {phases.shape}")
        if not np.all(np.isfinite(poses)):
            raise DatasetError("poses contain non-finite values")
        if n and (phases.min() < 0.0 or phases.max() >= 1.0):
            raise DatasetError("phases must lie in [0, 1)")
        self._validate_annotations(plane_annotations, n)

        self.subject_id = subject_id
        self.scan_name = scan_name or subject_id
        self.has_phase = has_phase
        self._images = images
        self._poses = poses
        self._phases = phases
        self.plane_annotations = dict(sorted(plane_annotations.items()))
        self._images.setflags(write=False)
        self._poses.setflags(write=False)
        self._phases.setflags(write=False)

    @staticmethod
    def _validate_annotations(annotations: dict[int, int], num_frames: int) -> None:
        if num_frames == 0:
            if annotations:
                raise DatasetError("empty trajectory cannot carry plane annotations")
            return
        for g in PLANE_IDS:
            if g not in annotations:
                raise DatasetError(f"plane {PLANE_NAMES[g]} unannotated")
        for g, t in annotations.items():
            if g not in PLANE_NAMES:
                raise DatasetError(f"unknown plane id {g} in annotations")
            if not isinstance(t, (int, np.integer)) or not 0 <= int(t) < num_frames:
                raise DatasetError(
                    f"plane {PLANE_NAMES[g]} annotation {t!r} outside frame range 0..{num_frames - 1}"
                )

    @property
    def num_frames(self) -> int:
        return self._images.shape[0]

    def __len__(self) -> int:
        return self.num_frames

    @property
    def image_shape(self) -> tuple[int, int]:
        return self._images.shape[1], self._images.shape[2]

    @property
    def poses_array(self) -> np.ndarray:
        """(T, 6) array of pose components, read-only."""
        return self._poses

    @property
    def images_u8(self) -> np.ndarray:
        """(T, H, W) uint8 image stack, read-only."""
        return self._images

    @property
    def phases(self) -> np.ndarray:
        return self._phases

    def _check_index(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.num_frames:
            raise IndexError(f"frame index {t} outside 0..{self.num_frames - 1}")
        return t

    def image(self, t: int) -> np.ndarray:
        return self._images[self._check_index(t)].astype(np.float32) / 255.0

    def pose(self, t: int) -> Pose:
        return Pose.from_array(self._poses[self._check_index(t)])

    def phase(self, t: int) -> float:
        return float(self._phases[self._check_index(t)])

    def frame(self, t: int) -> FrameRecord:
        t = self._check_index(t)
        return FrameRecord(index=t, image=self.image(t), pose=self.pose(t), phase=self.phase(t))


@dataclass
class DatasetSplit:
    """Train/val trajectory lists with subject-level separation."""

    train: list[Trajectory] = field(default_factory=list)
    val: list[Trajectory] = field(default_factory=list)

    def __post_init__(self) -> None:
        train_subjects = {t.subject_id for t in self.train}
        val_subjects = {t.subject_id for t in self.val}
        leaked = train_subjects & val_subjects
        if leaked:
            raise DatasetError(f"subjects present in both splits: {sorted(leaked)}")


def guidance_ground_truth(traj: Trajectory, t: int, g: int) -> Action:
    """Expert movement from the pose at frame t to the annotated plane g."""
    if g not in PLANE_NAMES:
        raise ValueError(f"plane id must be in 1..10, got {g}")
    if g not in traj.plane_annotations:
        raise DatasetError(f"plane {PLANE_NAMES[g]} unannotated in scan {traj.scan_name}")
    return relative_action(traj.pose(t), traj.pose(traj.plane_annotations[g]))


def write_trajectory(traj: Trajectory, scan_dir: str | Path) -> None:
    """Write one scan directory; loading it back round-trips exactly.

    Poses are stored as decimal text with 6 fractional digits, images as 8-bit
    grayscale PNG, so a second write/load cycle is byte-stable.
    """
    if traj.num_frames == 0:
        raise DatasetError("trajectory has no frames")
    scan_dir = Path(scan_dir)
    try:
        (scan_dir / FRAMES_DIR).mkdir(parents=True, exist_ok=True)
        meta = {
            "subject_id": traj.subject_id,
            "plane_annotations": {str(g): int(t) for g, t in traj.plane_annotations.items()},
            "image_height": traj.image_shape[0],
            "image_width": traj.image_shape[1],
            "has_phase": traj.has_phase,
        }
        (scan_dir / META_FILE).write_text(json.dumps(meta, indent=2) + "\n")

        lines = [POSES_HEADER]
        for t in range(traj.num_frames):
            vals = ",".join(f"{v:.6f}" for v in traj.poses_array[t])
            lines.append(f"{t},{vals},{traj.phases[t]:.6f}")
        (scan_dir / POSES_FILE).write_text("\n".join(lines) + "\n")

        for t in range(traj.num_frames):
            Image.fromarray(traj.images_u8[t], mode="L").save(
                scan_dir / FRAMES_DIR / f"frame_{t:06d}.png"
            )
    except OSError as exc:
        raise DatasetError(f"failed writing scan directory {scan_dir}: {exc}") from exc


def load_trajectory(scan_dir: str | Path) -> Trajectory:
    """Load one scan directory, enforcing every format invariant."""
    scan_dir = Path(scan_dir)
    meta_path = scan_dir / META_FILE
    poses_path = scan_dir / POSES_FILE
    if not meta_path.is_file():
        raise DatasetError(f"missing {meta_path}")
    if not poses_path.is_file():
        raise DatasetError(f"missing {poses_path}")

    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {meta_path}: {exc}") from exc
    for key in ("subject_id", "plane_annotations", "image_height", "image_width", "has_phase"):
        if key not in meta:
            raise DatasetError(f"{meta_path}: missing key {key!r}")
    height, width = int(meta["image_height"]), int(meta["image_width"])

    annotations: dict[int, int] = {}
    for key, value in meta["plane_annotations"].items():
        try:
            g = int(key)
        except (TypeError, ValueError) as exc:
            raise DatasetError(f"{meta_path}: malformed plane id {key!r}") from exc
        if g not in PLANE_NAMES:
            raise DatasetError(f"{meta_path}: unknown plane id {g}")
        if g in annotations:
            raise DatasetError(f"{meta_path}: duplicate annotation for plane {PLANE_NAMES[g]}")
        if not isinstance(value, int):
            raise DatasetError(f"{meta_path}: annotation for plane {PLANE_NAMES[g]} is not an integer")
        annotations[g] = value
    for g in PLANE_IDS:
        if g not in annotations:
            raise DatasetError(f"{meta_path}: plane {PLANE_NAMES[g]} unannotated")

    lines = poses_path.read_text().splitlines()
    if not lines or lines[0] != POSES_HEADER:
        raise DatasetError(f"{poses_path}: expected header {POSES_HEADER!r}")
    rows = lines[1:]
    poses = np.empty((len(rows), 6), dtype=np.float64)
    phases = np.empty(len(rows), dtype=np.float64)
    for i, row in enumerate(rows):
        parts = row.split(",")
        if len(parts) != 8:
            raise DatasetError(f"{poses_path}: row {i + 1} has {len(parts)} fields, expected 8")
        try:
            t = int(parts[0])
            values = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise DatasetError(f"{poses_path}: row {i + 1} malformed: {exc}") from exc
        if t != i:
            raise DatasetError(f"{poses_path}: row {i + 1} has frame index {t}, expected {i}")
        poses[i] = values[:6]
        phases[i] = values[6]

    frames_dir = scan_dir / FRAMES_DIR
    images = np.empty((len(rows), height, width), dtype=np.uint8)
    for t in range(len(rows)):
        frame_path = frames_dir / f"frame_{t:06d}.png"
        if not frame_path.is_file():
            raise DatasetError(f"missing frame image {frame_path}")
        with Image.open(frame_path) as img:
            arr = np.asarray(img.convert("L"), dtype=np.uint8)
        if arr.shape != (height, width):
            raise DatasetError(
                f"{frame_path}: image shape {arr.shape} does not match header ({height}, {width})"
            )
        images[t] = arr
    extra = sorted(frames_dir.glob("frame_*.png"))
    if len(extra) != len(rows):
        raise DatasetError(
            f"{scan_dir}: {len(extra)} frame images but {len(rows)} pose rows"
        )

    try:
        return Trajectory(
            subject_id=str(meta["subject_id"]),
            images=images,
            poses=poses,
            phases=phases,
            plane_annotations=annotations,
            scan_name=scan_dir.name,
            has_phase=bool(meta["has_phase"]),
        )
    except DatasetError as exc:
        raise DatasetError(f"{scan_dir}: {exc}") from exc


def write_split(root: str | Path, assignment: dict[str, str]) -> None:
    """Write split.json mapping scan directory name to 'train' or 'val'."""
    root = Path(root)
    for name, part in assignment.items():
        if part not in ("train", "val"):
            raise DatasetError(f"split for {name!r} must be 'train' or 'val', got {part!r}")
    root.mkdir(parents=True, exist_ok=True)
    (root / SPLIT_FILE).write_text(json.dumps(dict(sorted(assignment.items())), indent=2) + "\n")


def load_dataset(root: str | Path) -> DatasetSplit:
    """Load every scan listed in split.json under root.

    Trajectories come back ordered by (subject_id, scan name) within each
    split; a subject appearing in both splits is a load error.
    """
    root = Path(root)
    split_path = root / SPLIT_FILE
    if not split_path.is_file():
        raise DatasetError(f"missing {split_path}")
    try:
        assignment = json.loads(split_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {split_path}: {exc}") from exc

    buckets: dict[str, list[Trajectory]] = {"train": [], "val": []}
    for name, part in sorted(assignment.items()):
        if part not in buckets:
            raise DatasetError(f"{split_path}: scan {name!r} assigned to unknown split {part!r}")
        scan_dir = root / name
        if not scan_dir.is_dir():
            raise DatasetError(f"{split_path} lists {name!r} but {scan_dir} does not exist")
        buckets[part].append(load_trajectory(scan_dir))

    for part in buckets:
        buckets[part].sort(key=lambda tr: (tr.subject_id, tr.scan_name))
    return DatasetSplit(train=buckets["train"], val=buckets["val"])
