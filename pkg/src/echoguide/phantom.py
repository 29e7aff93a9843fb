"""Procedural phantom hearts and expert-like scan trajectory generation.

Each synthetic subject is a smooth 3-D density field built from ellipsoidal
blobs whose layout, size, and intensity are perturbed by a per-subject latent
vector, plus subject-specific poses for the ten standard planes. Rendering a
pose samples the field on the embedded image plane, modulates blob size with
the cardiac phase, and applies multiplicative speckle noise. The three
properties downstream training relies on: images are a deterministic function
of (subject, pose, phase); subjects vary structurally; standard planes are
subject-specific poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
import json

import numpy as np

from echoguide.pose import Pose, pose_distance, pose_distance_many
from echoguide.store import (
    PLANE_IDS,
    Trajectory,
    write_split,
    write_trajectory,
)

VOLUME_MM = 160.0           # bounding cube side, centered at the origin
NUM_BLOBS = 12
LATENT_DIM = 16
SPECKLE_STD = 0.08
PLANE_SHIFT_MM = 8.0        # per-subject plane perturbation bounds (inf-norm)
PLANE_TILT_DEG = 10.0
MAX_PHASE_GAIN = 0.15
PHANTOM_META_FILE = "phantom_meta.json"

_ATLAS_SEED = 20240915      # fixed: defines the shared species anatomy


class OutOfVolumeError(ValueError):
    """Requested probe pose lies outside twice the phantom bounding volume."""


@dataclass(frozen=True)
class CanonicalAtlas:
    """Shared canonical standard-plane poses and the phantom volume."""

    plane_poses: dict[int, Pose]
    volume_mm: float = VOLUME_MM


def _canonical_plane_poses() -> dict[int, Pose]:
    # Two clusters, loosely a parasternal arc (1-6) and an apical fan (7-10),
    # sweeping along z (the elevation-like axis the rendering is least
    # sensitive to). Spacing keeps every pair well above pose_distance 5 even
    # after the per-subject perturbations.
    raw = {
        1: (-30.0, 20.0, 30.0, 0.0, 20.0, -30.0),
        2: (-25.0, 15.0, 22.0, 10.0, 30.0, 60.0),
        3: (-20.0, 12.0, 14.0, 15.0, 32.0, 65.0),
        4: (-15.0, 8.0, 6.0, 20.0, 34.0, 70.0),
        5: (-10.0, 5.0, -2.0, 25.0, 36.0, 75.0),
        6: (-5.0, 0.0, -10.0, 30.0, 38.0, 80.0),
        7: (25.0, -30.0, -18.0, -45.0, 10.0, 140.0),
        8: (26.0, -28.0, -26.0, -40.0, 5.0, 135.0),
        9: (28.0, -26.0, -34.0, -35.0, 0.0, 100.0),
        10: (30.0, -24.0, -42.0, -30.0, -5.0, 75.0),
    }
    return {g: Pose(*vals) for g, vals in raw.items()}


def _build_atlas_internals():
    """Base blob layout and fixed latent projections, shared across subjects.

    The latent is split: the first half drives visible anatomy (blob layout),
    the second half drives the subject's standard-plane pose offsets. A single
    frame therefore never reveals where this subject's planes sit; only the
    scan trajectory's pose geometry does, which is what makes history genuinely
    informative for guidance.
    """
    rng = np.random.default_rng(_ATLAS_SEED)
    half = LATENT_DIM // 2
    centers = rng.uniform(-45.0, 45.0, size=(NUM_BLOBS, 3))
    # blobs are strongly elongated along z: a single frame pins down the
    # in-plane pose well but constrains the sweep axis only weakly, the way a
    # lone ultrasound slice underdetermines elevation
    axes = rng.uniform(10.0, 28.0, size=(NUM_BLOBS, 3))
    axes[:, 2] = rng.uniform(40.0, 90.0, size=NUM_BLOBS)
    amplitudes = rng.uniform(0.4, 1.0, size=NUM_BLOBS)
    phase_gains = rng.uniform(0.0, MAX_PHASE_GAIN, size=NUM_BLOBS)
    center_proj = rng.standard_normal((NUM_BLOBS, 3, half)) / np.sqrt(half)
    axes_proj = rng.standard_normal((NUM_BLOBS, 3, half)) / np.sqrt(half)
    amp_proj = rng.standard_normal((NUM_BLOBS, half)) / np.sqrt(half)
    plane_proj = {
        g: rng.standard_normal((6, half)) / np.sqrt(half) for g in PLANE_IDS
    }
    return {
        "centers": centers,
        "axes": axes,
        "amplitudes": amplitudes,
        "phase_gains": phase_gains,
        "center_proj": center_proj,
        "axes_proj": axes_proj,
        "amp_proj": amp_proj,
        "plane_proj": plane_proj,
    }


ATLAS = CanonicalAtlas(plane_poses=_canonical_plane_poses())
_INTERNALS = _build_atlas_internals()


@dataclass(frozen=True)
class PhantomSubject:
    """One synthetic individual: blob field plus its own standard-plane poses."""

    subject_id: str
    latent: np.ndarray
    blob_centers: np.ndarray      # (K, 3) mm
    blob_axes: np.ndarray         # (K, 3) mm, strictly positive
    blob_amplitudes: np.ndarray   # (K,) in (0, 1]
    blob_phase_gains: np.ndarray  # (K,) in [0, MAX_PHASE_GAIN]
    plane_poses: dict[int, Pose] = field(default_factory=dict)


def sample_subject(seed: int, subject_id: str | None = None) -> PhantomSubject:
    """Deterministically derive a subject's anatomy from an integer seed."""
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal(LATENT_DIM)
    anatomy_latent = latent[: LATENT_DIM // 2]
    plane_latent = latent[LATENT_DIM // 2 :]

    centers = _INTERNALS["centers"] + 6.0 * np.tanh(_INTERNALS["center_proj"] @ anatomy_latent)
    axes = _INTERNALS["axes"] * (
        1.0 + 0.2 * np.tanh(_INTERNALS["axes_proj"] @ anatomy_latent)
    )
    amplitudes = np.clip(
        _INTERNALS["amplitudes"]
        * (1.0 + 0.15 * np.tanh(_INTERNALS["amp_proj"] @ anatomy_latent)),
        0.05,
        1.0,
    )
    plane_poses = {}
    for g in PLANE_IDS:
        delta = np.tanh(_INTERNALS["plane_proj"][g] @ plane_latent)
        base = ATLAS.plane_poses[g].as_array()
        offset = delta * np.array(
            [PLANE_SHIFT_MM] * 3 + [PLANE_TILT_DEG] * 3
        )
        plane_poses[g] = Pose.from_array(base + offset)

    return PhantomSubject(
        subject_id=subject_id or f"phantom{seed}",
        latent=latent,
        blob_centers=centers,
        blob_axes=axes,
        blob_amplitudes=amplitudes,
        blob_phase_gains=_INTERNALS["phase_gains"].copy(),
        plane_poses=plane_poses,
    )


def _plane_grid(image_size: int) -> np.ndarray:
    """(H*W, 3) in-plane mm offsets; pixel pitch is VOLUME_MM / H."""
    pitch = VOLUME_MM / image_size
    coords = (np.arange(image_size) - (image_size - 1) / 2.0) * pitch
    xs, ys = np.meshgrid(coords, coords)  # row v -> y, col u -> x
    return np.stack([xs.ravel(), ys.ravel(), np.zeros(image_size * image_size)], axis=1)


def _euler_to_matrix_batch(angles_deg: np.ndarray) -> np.ndarray:
    """(B, 3, 3) rotation matrices for (B, 3) Z-Y-X Euler angles in degrees."""
    a = np.deg2rad(angles_deg)
    cx, sx = np.cos(a[:, 0]), np.sin(a[:, 0])
    cy, sy = np.cos(a[:, 1]), np.sin(a[:, 1])
    cz, sz = np.cos(a[:, 2]), np.sin(a[:, 2])
    R = np.empty((angles_deg.shape[0], 3, 3))
    R[:, 0, 0] = cz * cy
    R[:, 0, 1] = cz * sy * sx - sz * cx
    R[:, 0, 2] = cz * sy * cx + sz * sx
    R[:, 1, 0] = sz * cy
    R[:, 1, 1] = sz * sy * sx + cz * cx
    R[:, 1, 2] = sz * sy * cx - cz * sx
    R[:, 2, 0] = -sy
    R[:, 2, 1] = cy * sx
    R[:, 2, 2] = cy * cx
    return R


def _density_stack(
    subject: PhantomSubject,
    poses: np.ndarray,
    phases: np.ndarray,
    image_size: int,
) -> np.ndarray:
    """Noise-free blob density sampled on each pose's image plane, (B, H, W).

    The per-blob Mahalanobis term is expanded into a quadratic form so each
    blob costs two small einsums instead of a (B, P, 3) temporary.
    """
    grid = _plane_grid(image_size).astype(np.float32)  # (P, 3)
    R = _euler_to_matrix_batch(poses[:, 3:]).astype(np.float32)  # (B, 3, 3)
    points = poses[:, None, :3].astype(np.float32) + np.einsum(
        "bij,pj->bpi", R, grid
    )  # (B, P, 3)
    points_sq = points * points

    scale = (
        1.0 + subject.blob_phase_gains[None, :] * np.sin(2.0 * np.pi * phases)[:, None]
    ).astype(np.float32)  # (B, K)
    out = np.zeros((poses.shape[0], grid.shape[0]), dtype=np.float32)
    for k in range(NUM_BLOBS):
        inv_a2 = (
            1.0 / (subject.blob_axes[k][None, :].astype(np.float32) * scale[:, k, None]) ** 2
        )  # (B, 3)
        c = subject.blob_centers[k].astype(np.float32)
        # sum_i ((p_i - c_i) / a_i)^2 = p^2.w - 2 p.(c*w) + c^2.w
        q = (
            np.einsum("bpi,bi->bp", points_sq, inv_a2)
            - 2.0 * np.einsum("bpi,bi->bp", points, c[None, :] * inv_a2)
            + np.einsum("bi,bi->b", (c * c)[None, :] * np.ones_like(inv_a2), inv_a2)[:, None]
        )
        out += subject.blob_amplitudes[k].astype(np.float32) * np.exp(-0.5 * q)
    return out.reshape(poses.shape[0], image_size, image_size)


def _check_in_volume(poses: np.ndarray) -> None:
    limit = VOLUME_MM  # twice the half-side of the bounding cube
    if np.abs(poses[:, :3]).max(initial=0.0) > limit:
        raise OutOfVolumeError(
            f"probe translation exceeds twice the phantom volume (+/-{limit} mm)"
        )


def render(
    subject: PhantomSubject,
    pose: Pose,
    phase: float,
    noise_seed: int,
    image_size: int = 64,
) -> np.ndarray:
    """Render one image in [0, 1]; deterministic in all arguments."""
    if not 0.0 <= phase or not np.isfinite(phase):
        raise ValueError(f"phase must be finite and >= 0, got {phase}")
    poses = pose.as_array()[None, :]
    _check_in_volume(poses)
    img = _density_stack(subject, poses, np.array([phase % 1.0]), image_size)[0]
    rng = np.random.default_rng(noise_seed)
    img = img * (1.0 + SPECKLE_STD * rng.standard_normal(img.shape))
    return np.clip(img, 0.0, 1.0)


def render_stack(
    subject: PhantomSubject,
    poses: np.ndarray,
    phases: np.ndarray,
    noise_seeds: np.ndarray,
    image_size: int = 64,
    chunk: int = 256,
) -> np.ndarray:
    """Vectorized render of many frames; frame i equals render() on row i."""
    poses = np.asarray(poses, dtype=np.float64)
    phases = np.asarray(phases, dtype=np.float64) % 1.0
    _check_in_volume(poses)
    n = poses.shape[0]
    out = np.empty((n, image_size, image_size), dtype=np.float64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        out[lo:hi] = _density_stack(subject, poses[lo:hi], phases[lo:hi], image_size)
    for i in range(n):
        rng = np.random.default_rng(int(noise_seeds[i]))
        out[i] *= 1.0 + SPECKLE_STD * rng.standard_normal((image_size, image_size))
    return np.clip(out, 0.0, 1.0)


def _ease(s: np.ndarray) -> np.ndarray:
    return 3.0 * s**2 - 2.0 * s**3


def _quantize6(values: np.ndarray) -> np.ndarray:
    """Round to the exact doubles the 6-decimal text format stores."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    out = np.array([float(f"{v:.6f}") for v in flat])
    return out.reshape(np.shape(values))


def generate_trajectory(
    subject: PhantomSubject,
    num_frames: int,
    seed: int,
    image_size: int = 64,
    cycle_frames: int = 25,
    jitter_mm: float = 0.4,
    jitter_deg: float = 0.4,
    scan_name: str = "",
) -> Trajectory:
    """Noisy smooth tour visiting the subject's ten plane poses in order.

    Cubic easing between waypoints, bounded per-frame jitter, cardiac phase
    advancing one cycle per `cycle_frames` frames. The frame globally nearest
    each plane pose is annotated as that plane's timestamp. Deterministic in
    (subject, seed).
    """
    if num_frames < 10 * 20:
        raise ValueError(f"num_frames must be >= 200, got {num_frames}")
    rng = np.random.default_rng(seed)

    start = subject.plane_poses[1].as_array() + np.concatenate(
        [rng.uniform(-15.0, 15.0, 3), rng.uniform(-12.0, 12.0, 3)]
    )
    waypoints = [start] + [subject.plane_poses[g].as_array() for g in PLANE_IDS]

    bounds = np.linspace(0, num_frames, 11).astype(int)
    poses = np.empty((num_frames, 6))
    for g in range(1, 11):
        lo, hi = bounds[g - 1], bounds[g]
        m = hi - lo
        source, target = waypoints[g - 1], waypoints[g]
        delta = target - source
        delta[3:] = -((-delta[3:] + 180.0) % 360.0 - 180.0)  # shortest angular path
        s = _ease((np.arange(m) + 1.0) / m)
        poses[lo:hi] = source + s[:, None] * delta[None, :]

    jitter = rng.uniform(-1.0, 1.0, (num_frames, 6))
    jitter[:, :3] *= jitter_mm
    jitter[:, 3:] *= jitter_deg
    poses = poses + jitter
    noise_seeds = rng.integers(0, 2**31 - 1, num_frames)

    poses = _quantize6(poses)
    phases = _quantize6((np.arange(num_frames) % cycle_frames) / cycle_frames)

    annotations = {}
    for g in PLANE_IDS:
        annotations[g] = int(np.argmin(pose_distance_many(poses, subject.plane_poses[g])))

    images = render_stack(subject, poses, phases, noise_seeds, image_size)
    return Trajectory(
        subject_id=subject.subject_id,
        images=images,  # quantized to the 8-bit grid by Trajectory
        poses=poses,
        phases=phases,
        plane_annotations=annotations,
        scan_name=scan_name or f"{subject.subject_id}_scan00",
        has_phase=True,
    )


@dataclass
class PhantomConfig:
    """Synthetic dataset shape; defaults are the desk-scale reference."""

    train_subjects: int = 40
    val_subjects: int = 8
    scans_per_subject: int = 1
    frames_per_scan: int = 2000
    image_size: int = 64
    cycle_frames: int = 25
    seed: int = 0


def _subject_seed(master_seed: int, index: int, split: str) -> int:
    base = master_seed * 1_000_000
    return base + index if split == "train" else base + 100_000 + index


def generate_dataset(cfg: PhantomConfig, out_root: str | Path) -> list[Path]:
    """Generate and write the full synthetic dataset; pure in (cfg, seed)."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    assignment: dict[str, str] = {}
    subject_seeds: dict[str, int] = {}
    written: list[Path] = []

    for split, count in (("train", cfg.train_subjects), ("val", cfg.val_subjects)):
        for i in range(count):
            sseed = _subject_seed(cfg.seed, i, split)
            subject = sample_subject(sseed)
            subject_seeds[subject.subject_id] = sseed
            for k in range(cfg.scans_per_subject):
                scan_name = f"{subject.subject_id}_scan{k:02d}"
                traj = generate_trajectory(
                    subject,
                    cfg.frames_per_scan,
                    seed=sseed + 500_000_000 + k,
                    image_size=cfg.image_size,
                    cycle_frames=cfg.cycle_frames,
                    scan_name=scan_name,
                )
                scan_dir = out_root / scan_name
                write_trajectory(traj, scan_dir)
                assignment[scan_name] = split
                written.append(scan_dir)

    write_split(out_root, assignment)
    meta = {
        "master_seed": cfg.seed,
        "image_size": cfg.image_size,
        "cycle_frames": cfg.cycle_frames,
        "subjects": subject_seeds,
    }
    (out_root / PHANTOM_META_FILE).write_text(json.dumps(meta, indent=2) + "\n")
    return written


def load_subject_seeds(root: str | Path) -> dict[str, int]:
    """Map subject_id -> generator seed, written next to a synthetic dataset."""
    path = Path(root) / PHANTOM_META_FILE
    if not path.is_file():
        raise FileNotFoundError(
            f"{path} not found: dataset was not produced by the phantom generator"
        )
    meta = json.loads(path.read_text())
    return {str(k): int(v) for k, v in meta["subjects"].items()}
