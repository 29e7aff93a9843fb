"""Rigid-body algebra for probe poses and relative movement actions.

A pose is a translation in millimeters plus an orientation given as Euler
angles in degrees. The Euler convention is intrinsic Z-Y-X (yaw, pitch, roll
applied in the order rz, ry, rx), right-handed. Relative actions express the
movement taking one pose to another, with the translation written in the
source pose's body frame, so the same action means the same probe motion
regardless of where the probe currently sits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GIMBAL_EPS_DEG = 1e-6


def normalize_angle(angle: float) -> float:
    """Wrap an angle in degrees into (-180, 180]."""
    if not math.isfinite(angle):
        raise ValueError(f"angle must be finite, got {angle!r}")
    return -((-angle + 180.0) % 360.0 - 180.0)


@dataclass(frozen=True)
class Pose:
    """Absolute 6-DOF probe pose: translation in mm, Euler angles in degrees."""

    tx: float
    ty: float
    tz: float
    rx: float
    ry: float
    rz: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ValueError(f"pose components must be finite, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz, self.rx, self.ry, self.rz], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Pose":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (6,):
            raise ValueError(f"expected 6 components, got shape {arr.shape}")
        return cls(*(float(v) for v in arr))

    def normalize(self) -> "Pose":
        """Return the same pose with each angle wrapped into (-180, 180]."""
        return Pose(
            self.tx, self.ty, self.tz,
            normalize_angle(self.rx), normalize_angle(self.ry), normalize_angle(self.rz),
        )

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz], dtype=np.float64)

    @property
    def angles(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz], dtype=np.float64)


@dataclass(frozen=True)
class Action:
    """Relative 6-DOF probe movement, translation in the source-pose frame."""

    dtx: float
    dty: float
    dtz: float
    drx: float
    dry: float
    drz: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ValueError(f"action components must be finite, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.dtx, self.dty, self.dtz, self.drx, self.dry, self.drz], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Action":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (6,):
            raise ValueError(f"expected 6 components, got shape {arr.shape}")
        return cls(*(float(v) for v in arr))

    def normalize(self) -> "Action":
        return Action(
            self.dtx, self.dty, self.dtz,
            normalize_angle(self.drx), normalize_angle(self.dry), normalize_angle(self.drz),
        )


def euler_to_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation matrix for intrinsic Z-Y-X Euler angles in degrees."""
    ax, ay, az = np.deg2rad([rx, ry, rz])
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    return np.array(
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ],
        dtype=np.float64,
    )


def matrix_to_euler(R: np.ndarray) -> tuple[float, float, float]:
    """Decompose a rotation matrix into (rx, ry, rz) degrees, Z-Y-X convention.

    At gimbal lock (|pitch| = 90 deg) roll is fixed to 0 and the residual
    rotation folds into yaw, so the decomposition is always deterministic.
    """
    sy = float(np.clip(-R[2, 0], -1.0, 1.0))
    ry = math.degrees(math.asin(sy))
    if 90.0 - abs(ry) > GIMBAL_EPS_DEG:
        rx = math.degrees(math.atan2(R[2, 1], R[2, 2]))
        rz = math.degrees(math.atan2(R[1, 0], R[0, 0]))
    else:
        rx = 0.0
        rz = math.degrees(math.atan2(-R[0, 1], R[1, 1]))
    return rx, ry, rz


def pose_to_matrix(p: Pose) -> np.ndarray:
    """4x4 homogeneous rigid transform of a pose."""
    T = np.eye(4, dtype=np.float64)
    T[:3, :3] = euler_to_matrix(p.rx, p.ry, p.rz)
    T[:3, 3] = p.translation
    return T


def matrix_to_pose(T: np.ndarray) -> Pose:
    """Pose of a 4x4 homogeneous rigid transform (angles in (-180, 180])."""
    rx, ry, rz = matrix_to_euler(T[:3, :3])
    return Pose(
        float(T[0, 3]), float(T[1, 3]), float(T[2, 3]),
        normalize_angle(rx), normalize_angle(ry), normalize_angle(rz),
    )


def action_to_matrix(a: Action) -> np.ndarray:
    T = np.eye(4, dtype=np.float64)
    T[:3, :3] = euler_to_matrix(a.drx, a.dry, a.drz)
    T[:3, 3] = [a.dtx, a.dty, a.dtz]
    return T


def matrix_to_action(T: np.ndarray) -> Action:
    rx, ry, rz = matrix_to_euler(T[:3, :3])
    return Action(
        float(T[0, 3]), float(T[1, 3]), float(T[2, 3]),
        normalize_angle(rx), normalize_angle(ry), normalize_angle(rz),
    )


def relative_action(p_i: Pose, p_j: Pose) -> Action:
    """Movement taking p_i to p_j, expressed in p_i's body frame.

    Satisfies pose_to_matrix(p_i) @ action_to_matrix(a) == pose_to_matrix(p_j).
    """
    Ri = euler_to_matrix(p_i.rx, p_i.ry, p_i.rz)
    Rj = euler_to_matrix(p_j.rx, p_j.ry, p_j.rz)
    dt = Ri.T @ (p_j.translation - p_i.translation)
    rx, ry, rz = matrix_to_euler(Ri.T @ Rj)
    return Action(
        float(dt[0]), float(dt[1]), float(dt[2]),
        normalize_angle(rx), normalize_angle(ry), normalize_angle(rz),
    )


def apply_action(p: Pose, a: Action) -> Pose:
    """Pose reached by performing action a from pose p."""
    return matrix_to_pose(pose_to_matrix(p) @ action_to_matrix(a))


def invert_action(a: Action) -> Action:
    """Action undoing a: apply_action(apply_action(p, a), invert_action(a)) == p."""
    R = euler_to_matrix(a.drx, a.dry, a.drz)
    T = np.eye(4, dtype=np.float64)
    T[:3, :3] = R.T
    T[:3, 3] = -R.T @ [a.dtx, a.dty, a.dtz]
    return matrix_to_action(T)


def angle_difference(a: float, b: float) -> float:
    """Shortest signed angular difference a - b in degrees, in (-180, 180]."""
    return normalize_angle(a - b)


def pose_distance(p_i: Pose, p_j: Pose) -> float:
    """Combined mm + degree distance between two poses.

    Euclidean norm of the translation offset plus the Euclidean norm of the
    component-wise shortest angular differences. Translation (mm) and rotation
    (deg) are on the same order of magnitude in this domain, so the two terms
    are summed unweighted. Symmetric and satisfies the triangle inequality.
    """
    dt = p_j.translation - p_i.translation
    da = np.array(
        [angle_difference(aj, ai) for ai, aj in zip(p_i.angles, p_j.angles)],
        dtype=np.float64,
    )
    return float(np.linalg.norm(dt) + np.linalg.norm(da))


def pose_distance_many(poses: np.ndarray, ref: Pose) -> np.ndarray:
    """Vectorized pose_distance between each row of an (N, 6) array and ref."""
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 2 or poses.shape[1] != 6:
        raise ValueError(f"expected (N, 6) pose array, got shape {poses.shape}")
    ref_arr = ref.as_array()
    dt = poses[:, :3] - ref_arr[:3]
    da = poses[:, 3:] - ref_arr[3:]
    da = -((-da + 180.0) % 360.0 - 180.0)
    return np.linalg.norm(dt, axis=1) + np.linalg.norm(da, axis=1)
