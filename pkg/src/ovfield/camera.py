"""Pinhole cameras and the circular orbit rig."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Camera:
    """Pinhole camera.

    ``rotation`` maps camera coordinates to world coordinates. Camera axes
    follow the OpenCV convention: +x right, +y down, +z along the optical
    axis. Pixel ``(row, col)`` has its center at ``(col + 0.5, row + 0.5)``.
    """

    position: np.ndarray
    rotation: np.ndarray
    focal: float
    principal: tuple[float, float]  # (cx, cy) in pixels
    height: int
    width: int
    t_near: float
    t_far: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "rotation", rot)
        if not self.t_near < self.t_far:
            raise ValueError(f"t_near ({self.t_near}) must be < t_far ({self.t_far})")
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be at least 1x1")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[:, 2].copy()

    def to_line(self) -> str:
        vals = [*self.position, *self.rotation.ravel(), self.focal, *self.principal,
                self.height, self.width, self.t_near, self.t_far]
        return " ".join(repr(float(v)) for v in vals)

    @classmethod
    def from_line(cls, line: str) -> "Camera":
        v = [float(x) for x in line.split()]
        if len(v) != 19:
            raise ValueError(f"camera line needs 19 numbers, got {len(v)}")
        return cls(position=np.array(v[0:3]), rotation=np.array(v[3:12]).reshape(3, 3),
                   focal=v[12], principal=(v[13], v[14]), height=int(v[15]),
                   width=int(v[16]), t_near=v[17], t_far=v[18])


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera at ``position`` looking at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise ValueError("up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


def orbit_angles(n_views: int, offset: float = 0.0) -> np.ndarray:
    return offset + 2.0 * math.pi * np.arange(n_views) / n_views


def orbit_cameras(n_views: int, radius: float = 3.2, elevation_deg: float = 30.0,
                  height: int = 64, width: int = 64, focal: float | None = None,
                  scene_radius: float = math.sqrt(3.0), offset: float = 0.0,
                  target=(0.0, 0.0, 0.0)) -> list[Camera]:
    """Cameras evenly spaced on a circle at fixed elevation, all facing ``target``.

    Camera ``k`` sits at azimuth ``offset + 2*pi*k/n_views``. Near/far planes
    bracket a sphere of ``scene_radius`` around the target.
    """
    if n_views < 1:
        raise ValueError("need at least one view")
    if focal is None:
        focal = 1.4 * width
    elev = math.radians(elevation_deg)
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for k, az in enumerate(orbit_angles(n_views, offset)):
        pos = target + radius * np.array([math.cos(elev) * math.cos(az),
                                          math.cos(elev) * math.sin(az),
                                          math.sin(elev)])
        cams.append(Camera(position=pos, rotation=look_at(pos, target), focal=focal,
                           principal=(width / 2.0, height / 2.0), height=height,
                           width=width, t_near=max(radius - scene_radius, 1e-3),
                           t_far=radius + scene_radius, meta={"azimuth": float(az)}))
    return cams


def write_cameras(path, cams: list[Camera]) -> None:
    lines = ["# px py pz r00 r01 r02 r10 r11 r12 r20 r21 r22 f cx cy H W near far"]
    lines += [c.to_line() for c in cams]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_cameras(path) -> list[Camera]:
    with open(path) as fh:
        return [Camera.from_line(line) for line in fh
                if line.strip() and not line.startswith("#")]
