"""Analytic ground-truth renderers: depth maps for both cameras, line-drawing
sketches from depth/normal discontinuities, and raster-level sketch augmentation.

Replaces an offline rendering pipeline at toy scale; everything is exact and
deterministic so renders double as test oracles.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .cameras import OrthoCamera, PerspectiveCamera
from .config import SketchParams
from .geometry import Heightfield, normals_from_depth
from .scene import Scene

BG = 255
STROKE = 0


def render_depth(scene: Scene, cam) -> np.ndarray:
    """Per-pixel nearest-hit depth. Ortho: distance below the reference height
    (finite everywhere). Perspective: optical-axis depth, NaN for sky pixels
    (no hit within the far plane)."""
    if isinstance(cam, OrthoCamera):
        xx, yy = cam.cell_centers()
        return cam.height - scene.surface_height(xx, yy)
    return _raycast(scene, cam)


def _raycast(scene: Scene, cam: PerspectiveCamera) -> np.ndarray:
    rays = cam.pixel_rays()            # parameter t equals optical-axis depth
    o = cam.origin
    t_best = np.full(rays.shape[:2], np.inf)

    dz = rays[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = -o[2] / dz
    hit_ground = (dz < 0) & (t_ground > 0)
    t_best = np.where(hit_ground, t_ground, t_best)

    for b in scene.buildings:
        for (x0, y0, x1, y1) in b.rects:
            lo = np.array([x0, y0, 0.0])
            hi = np.array([x1, y1, b.height])
            t_box = _slab_hit(o, rays, lo, hi)
            t_best = np.minimum(t_best, t_box)

    valid = (t_best >= cam.near) & (t_best <= cam.far)
    return np.where(valid, t_best, np.nan)


def _slab_hit(o: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Entry parameter of ray-AABB intersection (inf where missed). Rays
    starting inside the box are treated as misses; cameras stay outside boxes."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    # rays parallel to a slab: inside -> (-inf, inf), outside -> no overlap
    par = d == 0
    if par.any():
        inside = (o >= lo) & (o <= hi)
        t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    tmin = np.minimum(t1, t2).max(-1)
    tmax = np.maximum(t1, t2).min(-1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def render_heightfield(scene: Scene, cam_t: OrthoCamera, n: int) -> Heightfield:
    """Exact top-down depth on an n x n grid over the ortho footprint."""
    pitch = 2.0 * cam_t.half_extent / n
    xx, yy = cam_t.cell_centers(n=n)
    values = cam_t.height - scene.surface_height(xx, yy)
    return Heightfield(
        values=values, valid=np.ones((n, n), dtype=bool),
        x0=cam_t.x0, y1=cam_t.y1, pitch=pitch, ortho_height=cam_t.height,
    )


def occupancy_mask(scene: Scene, cam_t: OrthoCamera, n: int | None = None) -> np.ndarray:
    xx, yy = cam_t.cell_centers(n=n)
    return scene.occupied(xx, yy).astype(np.uint8)


def render_sketch(depth: np.ndarray, normals: np.ndarray, params: SketchParams,
                  depth_jump_rel: float | None = None) -> np.ndarray:
    """Binary line drawing: a pixel is a stroke pixel iff its depth jumps by
    more than the relative threshold against a 4-neighbor, its normal creases
    past the angle threshold, or it borders invalid (sky) pixels."""
    tau_d = params.depth_jump_rel if depth_jump_rel is None else depth_jump_rel
    use_crease = math.isfinite(params.crease_deg) and params.crease_deg < 180.0
    cos_tau = math.cos(math.radians(params.crease_deg)) if use_crease else -2.0
    valid = np.isfinite(depth)
    jump = np.zeros(depth.shape, dtype=bool)
    crease = np.zeros(depth.shape, dtype=bool)

    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        d2 = np.roll(depth, shift, axis=axis)
        v2 = np.roll(valid, shift, axis=axis)
        n2 = np.roll(normals, shift, axis=axis)
        # wrapped border entries are never compared
        sl = [slice(None)] * 2
        sl[axis] = slice(1, None) if shift == 1 else slice(None, -1)
        sl = tuple(sl)

        both = valid & v2
        edge = valid & ~v2  # silhouette against sky: mark the valid side
        if np.isfinite(tau_d):
            with np.errstate(invalid="ignore", divide="ignore"):
                rel = np.abs(depth - d2) / np.minimum(np.abs(depth), np.abs(d2))
            edge |= both & (rel > tau_d)
        mask = np.zeros_like(jump)
        mask[sl] = edge[sl]
        jump |= mask
        if use_crease:
            dot = np.nansum(normals * n2, axis=-1)
            nn_ok = np.isfinite(normals[..., 0]) & np.isfinite(n2[..., 0])
            mask = np.zeros_like(crease)
            mask[sl] = (both & nn_ok & (dot < cos_tau))[sl]
            crease |= mask

    # normals are finite-difference estimates, so they tilt across depth cliffs;
    # creases are only meaningful away from jump pixels (the jump rule draws those)
    if crease.any():
        near_jump = ndimage.binary_dilation(jump, structure=np.ones((3, 3), bool))
        crease &= ~near_jump

    out = np.full(depth.shape, BG, dtype=np.uint8)
    out[jump | crease] = STROKE
    return out


def augment_sketch(sketch: np.ndarray, rng: np.random.Generator,
                   params: SketchParams) -> np.ndarray:
    """Stroke-segment dropout, <=1 px jitter and line-width changes.
    Identity when every knob is off; deterministic for a fixed generator."""
    no_op = params.p_drop == 0 and params.jitter_px == 0 and params.width_change_prob == 0
    if no_op:
        return sketch.copy()
    h, w = sketch.shape
    mask = sketch < 128

    if params.p_drop > 0:
        bs = max(1, params.drop_block)
        nby, nbx = math.ceil(h / bs), math.ceil(w / bs)
        drop = rng.random((nby, nbx)) < params.p_drop
        drop_px = np.kron(drop, np.ones((bs, bs), dtype=bool))[:h, :w]
        mask = mask & ~drop_px

    if params.jitter_px > 0 and mask.any():
        ii, jj = np.nonzero(mask)
        di = rng.integers(-params.jitter_px, params.jitter_px + 1, size=ii.shape)
        dj = rng.integers(-params.jitter_px, params.jitter_px + 1, size=jj.shape)
        ii = np.clip(ii + di, 0, h - 1)
        jj = np.clip(jj + dj, 0, w - 1)
        mask = np.zeros_like(mask)
        mask[ii, jj] = True

    if params.width_change_prob > 0 and rng.random() < params.width_change_prob:
        cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
        if rng.random() < 0.5:
            mask = ndimage.binary_dilation(mask, structure=cross)
        else:
            mask = ndimage.binary_erosion(mask, structure=cross)

    out = np.full((h, w), BG, dtype=np.uint8)
    out[mask] = STROKE
    return out


def sketch_pair(scene: Scene, cam_p: PerspectiveCamera, cam_t: OrthoCamera,
                params: SketchParams):
    """Render both ground-truth sketches plus the underlying maps."""
    d_t = render_depth(scene, cam_t)
    d_p = render_depth(scene, cam_p)
    n_t = normals_from_depth(d_t, cam_t)
    n_p = normals_from_depth(d_p, cam_p)
    s_t = render_sketch(d_t, n_t, params, depth_jump_rel=params.td_depth_jump_rel)
    s_p = render_sketch(d_p, n_p, params)
    return s_t, s_p, d_t, d_p
