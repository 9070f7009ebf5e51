"""Procedural toy city blocks: axis-aligned rectangular / L-shaped buildings
scattered over a flat square ground patch, plus the fixed two-camera capture rig.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .cameras import OrthoCamera, PerspectiveCamera, make_perspective, rotation_from_yaw_pitch
from .config import CameraParams, SceneParams


class SceneGenerationError(RuntimeError):
    pass


class CameraPlacementError(RuntimeError):
    pass


@dataclass
class Building:
    id: int
    height: float
    rects: list            # list of (x0, y0, x1, y1); one rect, or two for an L
    polygon: list = field(default_factory=list)  # outline vertices, CCW

    def contains(self, x, y):
        """Vectorized point-in-footprint test (boundary inclusive)."""
        x = np.asarray(x)
        y = np.asarray(y)
        inside = np.zeros(x.shape, dtype=bool)
        for (x0, y0, x1, y1) in self.rects:
            inside |= (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
        return inside

    def area(self) -> float:
        return sum((x1 - x0) * (y1 - y0) for (x0, y0, x1, y1) in self.rects)

    def bounds(self):
        r = np.array(self.rects)
        return r[:, 0].min(), r[:, 1].min(), r[:, 2].max(), r[:, 3].max()


@dataclass
class Scene:
    extent: float
    seed: int
    buildings: list

    def surface_height(self, x, y):
        """Ground (0) or rooftop height at world xy; buildings never overlap so
        a plain max over footprints is exact."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        h = np.zeros(x.shape, dtype=np.float64)
        for b in self.buildings:
            m = b.contains(x, y)
            h = np.where(m, b.height, h)
        return h

    def occupied(self, x, y):
        occ = np.zeros(np.asarray(x).shape, dtype=bool)
        for b in self.buildings:
            occ |= b.contains(x, y)
        return occ

    def to_dict(self) -> dict:
        return {
            "extent": self.extent,
            "seed": self.seed,
            "buildings": [
                {
                    "id": b.id,
                    "height": b.height,
                    "rects": [[float(v) for v in r] for r in b.rects],
                    "polygon": [[float(v) for v in p] for p in b.polygon],
                }
                for b in self.buildings
            ],
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        buildings = [
            Building(
                id=bd["id"],
                height=bd["height"],
                rects=[tuple(r) for r in bd["rects"]],
                polygon=[tuple(p) for p in bd.get("polygon", [])],
            )
            for bd in d["buildings"]
        ]
        return cls(extent=d["extent"], seed=d["seed"], buildings=buildings)

    @classmethod
    def load(cls, path) -> "Scene":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _rect_outline(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def _cut_corner(x0, y0, x1, y1, corner, cw, ch):
    """Split a rectangle minus one corner into two rects plus the L outline."""
    if corner == "ne":
        rects = [(x0, y0, x1, y1 - ch), (x0, y1 - ch, x1 - cw, y1)]
        poly = [(x0, y0), (x1, y0), (x1, y1 - ch), (x1 - cw, y1 - ch), (x1 - cw, y1), (x0, y1)]
    elif corner == "nw":
        rects = [(x0, y0, x1, y1 - ch), (x0 + cw, y1 - ch, x1, y1)]
        poly = [(x0, y0), (x1, y0), (x1, y1), (x0 + cw, y1), (x0 + cw, y1 - ch), (x0, y1 - ch)]
    elif corner == "se":
        rects = [(x0, y0 + ch, x1, y1), (x0, y0, x1 - cw, y0 + ch)]
        poly = [(x0, y0), (x1 - cw, y0), (x1 - cw, y0 + ch), (x1, y0 + ch), (x1, y1), (x0, y1)]
    else:  # sw
        rects = [(x0, y0 + ch, x1, y1), (x0 + cw, y0, x1, y0 + ch)]
        poly = [(x0 + cw, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0 + ch), (x0 + cw, y0 + ch)]
    return rects, poly


def _clear_of(rects_a, rects_b, gap: float) -> bool:
    for (ax0, ay0, ax1, ay1) in rects_a:
        for (bx0, by0, bx1, by1) in rects_b:
            if ax0 < bx1 + gap and bx0 < ax1 + gap and ay0 < by1 + gap and by0 < ay1 + gap:
                return False
    return True


def generate_scene(seed: int, params: SceneParams) -> Scene:
    """Rejection-sample non-overlapping building footprints; deterministic in seed."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(params.n_buildings_min, params.n_buildings_max + 1))
    buildings: list[Building] = []
    lo = params.margin
    for bid in range(n):
        placed = False
        for _ in range(params.max_attempts):
            w = rng.uniform(params.side_min, params.side_max)
            d = rng.uniform(params.side_min, params.side_max)
            hi_x = params.extent - params.margin - w
            hi_y = params.extent - params.margin - d
            if hi_x <= lo or hi_y <= lo:
                continue
            x0 = rng.uniform(lo, hi_x)
            y0 = rng.uniform(lo, hi_y)
            x1, y1 = x0 + w, y0 + d
            if rng.uniform() < params.l_shape_prob:
                corner = ["ne", "nw", "se", "sw"][int(rng.integers(0, 4))]
                cw = rng.uniform(0.3, 0.6) * w
                ch = rng.uniform(0.3, 0.6) * d
                rects, poly = _cut_corner(x0, y0, x1, y1, corner, cw, ch)
            else:
                rects, poly = [(x0, y0, x1, y1)], _rect_outline(x0, y0, x1, y1)
            area = sum((r[2] - r[0]) * (r[3] - r[1]) for r in rects)
            if area < params.min_area:
                continue
            if all(_clear_of(rects, b.rects, params.gap) for b in buildings):
                height = float(rng.uniform(params.height_min, params.height_max))
                buildings.append(Building(id=bid + 1, height=height, rects=rects, polygon=poly))
                placed = True
                break
        if not placed:
            raise SceneGenerationError(
                f"could not place building {bid + 1}/{n} after {params.max_attempts} attempts; "
                "parameters are too dense"
            )
    return Scene(extent=params.extent, seed=seed, buildings=buildings)


def augment_heights(scene: Scene, rng: np.random.Generator, params: SceneParams) -> Scene:
    """Scale each building height by an independent draw, clamped to the config range."""
    if not (0 < params.height_scale_min <= params.height_scale_max):
        raise ValueError("height scale range must be positive")
    out = []
    for b in scene.buildings:
        s = rng.uniform(params.height_scale_min, params.height_scale_max)
        h = float(np.clip(b.height * s, params.height_min, params.height_max))
        out.append(Building(id=b.id, height=h, rects=list(b.rects), polygon=list(b.polygon)))
    return Scene(extent=scene.extent, seed=scene.seed, buildings=out)


def place_cameras(
    scene: Scene, params: CameraParams, resolution: int,
    yaw_deg: float | None = None,
) -> tuple[PerspectiveCamera, OrthoCamera]:
    """Build the capture rig for a scene.

    The perspective camera stands back from the patch so that the midpoint of
    its near..far range lies directly above the patch center; the orthographic
    camera is centered on that midpoint, looking straight down, with a footprint
    that covers the whole patch.
    """
    if yaw_deg is None:
        if params.randomize_yaw:
            yaw_deg = float(np.random.default_rng(scene.seed ^ 0x9E3779B9).uniform(0.0, 360.0))
        else:
            yaw_deg = params.yaw_deg

    anchor = np.array([scene.extent / 2.0, scene.extent / 2.0])
    t_mid = 0.5 * (params.near + params.far)
    look = rotation_from_yaw_pitch(yaw_deg, params.pitch_deg)[:, 2]
    origin = np.array(
        [anchor[0] - look[0] * t_mid, anchor[1] - look[1] * t_mid, params.height]
    )

    if scene.occupied(origin[0], origin[1]):
        raise CameraPlacementError("camera standpoint falls inside a building footprint")

    cam_p = make_perspective(
        origin, yaw_deg, params.pitch_deg, params.vfov_deg,
        width=resolution, height=resolution, near=params.near, far=params.far,
    )
    center = cam_p.origin + cam_p.look_dir * t_mid
    half = scene.extent / 2.0 + params.coverage_margin
    cam_t = OrthoCamera(center=center, half_extent=half, grid_size=resolution,
                        height=params.ortho_height)
    # the rig must keep the whole patch inside the top-down footprint
    if (abs(center[0] - anchor[0]) + scene.extent / 2.0 > half + 1e-9) or (
        abs(center[1] - anchor[1]) + scene.extent / 2.0 > half + 1e-9
    ):
        raise CameraPlacementError("top-down footprint does not cover the scene patch")
    return cam_p, cam_t


def extra_view(scene: Scene, params: CameraParams, resolution: int) -> PerspectiveCamera:
    """Preconfigured second perspective camera for multi-view fusion."""
    cam_p, _ = place_cameras(scene, params, resolution, yaw_deg=params.extra_view_yaw_deg)
    return cam_p
