"""Camera models and projection math.

World frame: z up, ground plane at z=0, units in meters. The perspective
camera uses OpenCV-style axes (x right, y down, z forward) with pixel centers
at integer coordinates and the principal point at the image center. The
top-down orthographic camera is a square cell grid looking straight down;
row 0 is the north (max y) edge and cells are sampled at their centers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

UP = np.array([0.0, 0.0, 1.0])


@dataclass
class PerspectiveCamera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray   # 3x3, world-from-camera
    origin: np.ndarray     # (3,), world
    near: float
    far: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.validate()

    def validate(self):
        if not (self.near > 0 and self.far > self.near):
            raise ValueError(f"invalid clip planes near={self.near} far={self.far}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation not orthonormal (err={err:.2e})")

    @property
    def look_dir(self) -> np.ndarray:
        return self.rotation[:, 2]

    def pixel_rays(self) -> np.ndarray:
        """World-space ray directions per pixel, scaled so that the ray
        parameter equals camera-space z (depth along the optical axis)."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        d_cam = np.stack(
            [(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)],
            axis=-1,
        )
        return d_cam @ self.rotation.T

    def pixel_ray(self, u: float, v: float) -> np.ndarray:
        d = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        return self.rotation @ d

    def project(self, points: np.ndarray):
        """Project world points. Returns (u, v, z) arrays; z is the optical-axis
        depth (positive in front of the camera)."""
        p = np.atleast_2d(points) - self.origin
        cam = p @ self.rotation  # == rotation.T applied to rows
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        return u, v, z

    def backproject(self, u, v, depth):
        """Inverse of project for positive depths."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        cam = np.stack(
            [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth],
            axis=-1,
        )
        return cam @ self.rotation.T + self.origin

    def in_image(self, u, v) -> np.ndarray:
        return (u >= -0.5) & (u <= self.width - 0.5) & (v >= -0.5) & (v <= self.height - 0.5)

    def to_dict(self) -> dict:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.origin
        return {
            "type": "perspective",
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "near": self.near,
            "far": self.far,
            "world_from_cam": [round(float(x), 12) for x in m.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerspectiveCamera":
        m = np.array(d["world_from_cam"], dtype=np.float64).reshape(4, 4)
        return cls(
            width=d["width"], height=d["height"],
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            rotation=m[:3, :3], origin=m[:3, 3],
            near=d["near"], far=d["far"],
        )


@dataclass
class OrthoCamera:
    center: np.ndarray     # (3,) world point on the perspective look-at ray
    half_extent: float     # footprint covers [cx - h, cx + h] x [cy - h, cy + h]
    grid_size: int         # cells per side
    height: float          # reference plane: depth = height - surface z
    down: np.ndarray = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.down is None:
            self.down = np.array([0.0, 0.0, -1.0])
        self.down = np.asarray(self.down, dtype=np.float64)
        if abs(np.linalg.norm(self.down) - 1.0) > 1e-9:
            raise ValueError("down axis must be unit length")
        if self.half_extent <= 0:
            raise ValueError("half_extent must be positive")

    @property
    def pitch(self) -> float:
        """Cell size in meters."""
        return 2.0 * self.half_extent / self.grid_size

    @property
    def x0(self) -> float:
        return float(self.center[0] - self.half_extent)

    @property
    def y1(self) -> float:
        return float(self.center[1] + self.half_extent)

    def cell_centers(self, n: int | None = None):
        """World (x, y) coordinates of cell centers for an n x n grid over the
        same footprint (defaults to grid_size)."""
        n = n or self.grid_size
        pitch = 2.0 * self.half_extent / n
        xs = self.x0 + (np.arange(n) + 0.5) * pitch
        ys = self.y1 - (np.arange(n) + 0.5) * pitch
        return np.meshgrid(xs, ys)  # (x over cols, y over rows)

    def world_to_cell(self, x, y, n: int | None = None):
        """Map world xy to integer (row, col) on an n x n grid; no clipping."""
        n = n or self.grid_size
        pitch = 2.0 * self.half_extent / n
        col = np.floor((np.asarray(x) - self.x0) / pitch).astype(np.int64)
        row = np.floor((self.y1 - np.asarray(y)) / pitch).astype(np.int64)
        return row, col

    def cell_to_world(self, row, col, n: int | None = None):
        n = n or self.grid_size
        pitch = 2.0 * self.half_extent / n
        x = self.x0 + (np.asarray(col) + 0.5) * pitch
        y = self.y1 - (np.asarray(row) + 0.5) * pitch
        return x, y

    def to_dict(self) -> dict:
        return {
            "type": "ortho",
            "center": [float(c) for c in self.center],
            "down": [float(c) for c in self.down],
            "half_extent": self.half_extent,
            "grid_size": self.grid_size,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OrthoCamera":
        return cls(
            center=np.array(d["center"]),
            half_extent=d["half_extent"],
            grid_size=d["grid_size"],
            height=d["height"],
            down=np.array(d["down"]),
        )


def rotation_from_yaw_pitch(yaw_deg: float, pitch_deg: float) -> np.ndarray:
    """World-from-camera rotation for a camera looking along the yaw direction
    (x-axis at yaw=0, y-axis at yaw=90) tilted by pitch (negative = down)."""
    yaw = math.radians(yaw_deg)
    pitch = math.radians(pitch_deg)
    look = np.array(
        [math.cos(yaw) * math.cos(pitch), math.sin(yaw) * math.cos(pitch), math.sin(pitch)]
    )
    right = np.cross(look, UP)
    nrm = np.linalg.norm(right)
    if nrm < 1e-9:
        raise ValueError("camera may not look straight up or down")
    right /= nrm
    down = np.cross(look, right)
    return np.stack([right, down, look], axis=1)


def make_perspective(
    origin, yaw_deg: float, pitch_deg: float, vfov_deg: float,
    width: int, height: int, near: float, far: float,
) -> PerspectiveCamera:
    f = (height / 2.0) / math.tan(math.radians(vfov_deg) / 2.0)
    return PerspectiveCamera(
        width=width, height=height,
        fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        rotation=rotation_from_yaw_pitch(yaw_deg, pitch_deg),
        origin=np.asarray(origin, dtype=np.float64),
        near=near, far=far,
    )


def save_cameras(path, cam_p: PerspectiveCamera, cam_t: OrthoCamera, extra=None):
    doc = {"perspective": cam_p.to_dict(), "ortho": cam_t.to_dict()}
    if extra:
        doc["extra_perspective"] = [c.to_dict() for c in extra]
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)


def load_cameras(path):
    with open(path) as f:
        doc = json.load(f)
    cam_p = PerspectiveCamera.from_dict(doc["perspective"])
    cam_t = OrthoCamera.from_dict(doc["ortho"])
    extra = [PerspectiveCamera.from_dict(d) for d in doc.get("extra_perspective", [])]
    return cam_p, cam_t, extra
