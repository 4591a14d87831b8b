"""Pinhole camera in the OpenCV convention: x right, y down, z forward."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera, (3, 3)
    translation: np.ndarray  # world -> camera, (3,)
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near plane must be closer than far plane")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"camera rotation is not orthonormal (error {err:.2e})")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x: float, world_to_camera: np.ndarray,
                 **kw) -> "Camera":
        fx = 0.5 * width / np.tan(0.5 * fov_x)
        W = np.asarray(world_to_camera, dtype=np.float64)
        return cls(width, height, fx, fx, 0.5 * width, 0.5 * height, W[:3, :3], W[:3, 3], **kw)

    @classmethod
    def look_at(cls, eye, target, up, width: int, height: int, fov_x: float, **kw) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [1.0, 0.0, 0.0] if abs(fwd[0]) < 0.9 else [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        W = np.eye(4)
        W[:3, :3] = R
        W[:3, 3] = -R @ eye
        return cls.from_fov(width, height, fov_x, W, **kw)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def world_to_camera(self) -> np.ndarray:
        W = np.eye(4)
        W[:3, :3] = self.rotation
        W[:3, 3] = self.translation
        return W

    def to_camera(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def project(self, points_cam):
        """Camera-space points to continuous pixel coordinates (pixel centres at i + 0.5)."""
        p = np.asarray(points_cam)
        z = p[..., 2]
        return np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], -1)

    def pixel_directions(self) -> np.ndarray:
        """Camera-space ray directions with unit z component, shape (H, W, 3)."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        X, Y = np.meshgrid(xs, ys)
        return np.stack([X, Y, np.ones_like(X)], axis=-1)

    def world_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Ray origin and unit world-space directions per pixel."""
        d = self.pixel_directions() @ self.rotation  # R^T d
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return self.center, d

    def transformed(self, R_world: np.ndarray, t_world: np.ndarray) -> "Camera":
        """The same view after the world is moved by x -> R x + t."""
        R = self.rotation @ R_world.T
        t = self.translation - R @ t_world
        return Camera(self.width, self.height, self.fx, self.fy, self.cx, self.cy, R, t,
                      self.near, self.far)
