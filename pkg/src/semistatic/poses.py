"""Rigid poses and the pinhole camera model.

Camera frames follow the optical convention: x right, y down, z forward.
A camera ``Pose`` maps camera-frame points into the world frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation


def wrap_angle(phi):
    """Wrap to (-pi, pi]."""
    phi = np.asarray(phi, dtype=float)
    out = np.mod(phi + math.pi, 2.0 * math.pi) - math.pi
    out = np.where(out <= -math.pi, out + 2.0 * math.pi, out)
    # angles already in range pass through untouched (the shift above rounds tiny ones to 0)
    out = np.where((phi > -math.pi) & (phi <= math.pi), phi, out)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Pose:
    translation: np.ndarray
    quaternion: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))  # xyzw

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        q = np.asarray(self.quaternion, dtype=float).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {np.linalg.norm(q)} is not 1")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "quaternion", q)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3))

    @classmethod
    def from_matrix(cls, rotation, translation):
        q = Rotation.from_matrix(rotation).as_quat()
        return cls(translation, q / np.linalg.norm(q))

    @classmethod
    def from_yaw(cls, translation, phi):
        q = Rotation.from_euler("z", phi).as_quat()
        return cls(translation, q / np.linalg.norm(q))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)):
        """Camera pose at ``eye`` whose optical axis points at ``target``."""
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=float))
        if np.linalg.norm(x) < 1e-9:
            raise ValueError("viewing direction parallel to up vector")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls.from_matrix(np.column_stack([x, y, z]), eye)

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.quaternion).as_matrix()

    @property
    def yaw(self) -> float:
        r = self.rotation
        return wrap_angle(math.atan2(r[1, 0], r[0, 0]))

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        r = self.rotation.T
        return Pose.from_matrix(r, -r @ self.translation)

    def apply_inverse(self, points):
        points = np.asarray(points, dtype=float)
        return (points - self.translation) @ self.rotation

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first."""
        return Pose.from_matrix(self.rotation @ other.rotation, self.apply(other.translation))


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    max_range: float = 6.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    @classmethod
    def from_fov(cls, width, height, hfov_deg, max_range=6.0):
        fx = 0.5 * width / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(fx, fx, width / 2.0, height / 2.0, width, height, max_range)

    def project(self, points_cam):
        """Pixel coordinates ``(u, v)`` and depth of camera-frame points."""
        p = np.asarray(points_cam, dtype=float)
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p[:, 0] / z + self.cx
            v = self.fy * p[:, 1] / z + self.cy
        return u, v, z

    def in_frustum(self, points_cam):
        u, v, z = self.project(points_cam)
        return (z > 0) & (z <= self.max_range) & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)

    def pixel_rays(self):
        """Unit-depth ray directions (camera frame) through every pixel centre, row-major."""
        us, vs = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        x = (us.ravel() - self.cx) / self.fx
        y = (vs.ravel() - self.cy) / self.fy
        return np.column_stack([x, y, np.ones_like(x)])
