"""Skeleton constants, camera projection and the canonical (heading-free) pose.

Poses are plain ``(16, 3)`` float64 arrays in millimetres, root-relative, with
+Z pointing up. Batched variants accept ``(N, 16, 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePoseError, InvalidArgumentError, ProjectionError, ValidationError

N_JOINTS = 16
ROOT = 0
LEFT_HIP = 1

JOINT_NAMES = (
    "pelvis", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
    "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 8, 10, 11, 8, 13, 14)

EPS_BONE = 1e-6  # mm

# Half of the normalised image extent, in world mm at the subject: a 2 m
# subject spans 80% of the frame.
HALF_EXTENT_MM = 1250.0
# Half sensor width used by the pinhole model (35 mm film).
SENSOR_HALF_MM = 18.0


def as_pose(joints, *, check_root=True) -> np.ndarray:
    p = np.asarray(joints, dtype=np.float64)
    if p.shape == (3 * N_JOINTS,):
        p = p.reshape(N_JOINTS, 3)
    if p.shape != (N_JOINTS, 3):
        raise ValidationError(f"pose must have {N_JOINTS} joints, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValidationError("pose has non-finite coordinates")
    if check_root and np.any(p[ROOT] != 0.0):
        raise ValidationError("pose is not root-relative (pelvis != 0)")
    return p


def rotation_z(theta: float) -> np.ndarray:
    theta = float(theta)
    if not np.isfinite(theta):
        raise InvalidArgumentError(f"rotation angle must be finite, got {theta}")
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def canonical_transform(pose) -> tuple[np.ndarray, float]:
    """Rotate ``pose`` about +Z so the pelvis->left-hip bone has y == 0, x >= 0.

    Returns the rotated pose and the applied angle, i.e.
    ``rotation_z(theta) @ joint`` reproduces every output joint.
    """
    p = np.asarray(pose, dtype=np.float64)
    bone = p[LEFT_HIP] - p[ROOT]
    if np.linalg.norm(bone) <= EPS_BONE:
        raise DegeneratePoseError(f"left-hip bone length {np.linalg.norm(bone):.3g} mm is degenerate")
    theta = -float(np.arctan2(bone[1], bone[0]))
    return p @ rotation_z(theta).T, theta


def canonical_transform_batch(poses) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(poses, dtype=np.float64)
    bone = p[:, LEFT_HIP] - p[:, ROOT]
    bad = np.linalg.norm(bone, axis=1) <= EPS_BONE
    if np.any(bad):
        raise DegeneratePoseError(f"degenerate left-hip bone in pose {int(np.argmax(bad))}")
    theta = -np.arctan2(bone[:, 1], bone[:, 0])
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty_like(p)
    out[..., 0] = c[:, None] * p[..., 0] - s[:, None] * p[..., 1]
    out[..., 1] = s[:, None] * p[..., 0] + c[:, None] * p[..., 1]
    out[..., 2] = p[..., 2]
    return out, theta


def default_focal(distance: float) -> float:
    return SENSOR_HALF_MM * distance / HALF_EXTENT_MM


@dataclass(frozen=True)
class Camera:
    azimuth: float
    elevation: float
    distance: float
    mode: str = "perspective"
    focal: float | None = None

    def __post_init__(self):
        if self.mode not in ("orthographic", "perspective"):
            raise InvalidArgumentError(f"unknown camera mode {self.mode!r}")
        if not self.distance > 0:
            raise InvalidArgumentError("camera distance must be positive")
        if self.mode == "perspective":
            if self.focal is None:
                object.__setattr__(self, "focal", default_focal(self.distance))
            if not self.focal > 0:
                raise InvalidArgumentError("focal length must be positive")

    @property
    def center(self) -> np.ndarray:
        ce = np.cos(self.elevation)
        return self.distance * np.array(
            [ce * np.cos(self.azimuth), ce * np.sin(self.azimuth), np.sin(self.elevation)]
        )

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """Rotation (rows: right, up, forward) and translation of the camera frame."""
        c = self.center
        fwd = -c / np.linalg.norm(c)
        right = np.array([-np.sin(self.azimuth), np.cos(self.azimuth), 0.0])
        up = np.cross(right, fwd)
        R = np.stack([right, up, fwd])
        return R, -R @ c

    def to_dict(self) -> dict:
        return {"azimuth": self.azimuth, "elevation": self.elevation, "distance": self.distance,
                "mode": self.mode, "focal": self.focal}


def project_batch(poses, camera: Camera) -> np.ndarray:
    """Project ``(N, 16, 3)`` poses to ``(N, 32)`` normalised observations."""
    p = np.asarray(poses, dtype=np.float64)
    R, t = camera.world_to_camera()
    # elementwise so single and batched calls agree bit for bit
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    cam = np.stack([R[k, 0] * x + R[k, 1] * y + R[k, 2] * z + t[k] for k in range(3)], axis=-1)
    if camera.mode == "orthographic":
        uv = cam[..., :2] / HALF_EXTENT_MM
    else:
        depth = cam[..., 2]
        if np.any(depth <= 0):
            raise ProjectionError("joint behind the camera")
        uv = (camera.focal / SENSOR_HALF_MM) * cam[..., :2] / depth[..., None]
    return uv.reshape(*p.shape[:-2], 2 * N_JOINTS)


def project(pose, camera: Camera) -> np.ndarray:
    return project_batch(np.asarray(pose, dtype=np.float64)[None], camera)[0]
