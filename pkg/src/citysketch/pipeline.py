"""End-to-end inference: stroke rasterization, checkpoint bundle loading, and
the full sketch-pair -> heightfield -> mesh reconstruction (single or fused
multi-view), plus the instant layout-only preview."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cameras import OrthoCamera, PerspectiveCamera
from .config import PipelineConfig
from .geometry import (
    backproject_depth, build_occupancy_volume, clamp_heightfield,
    connected_components, fuse_heightfields, heightfield_to_mesh, Heightfield,
    project_strokes, project_to_heightfield,
)
from .nets import (
    Denoiser, DepthAutoencoder, DepthNet, MaskNet, SketchCondEncoder, load_checkpoint,
)
from .scene import Scene, extra_view, place_cameras
from .schedule import NoiseSchedule, ddim_sample

CANVASES = ("topdown", "perspective", "perspective2")


class ReconstructionError(RuntimeError):
    pass


@dataclass
class StrokeSet:
    canvas: str
    strokes: list = field(default_factory=list)   # list of (K, 2) float arrays
    width: float = 1.5

    def __post_init__(self):
        if self.canvas not in CANVASES:
            raise ValueError(f"unknown canvas {self.canvas!r}")
        clean = []
        for s in self.strokes:
            s = np.asarray(s, dtype=np.float64).reshape(-1, 2)
            if len(s) < 2:
                raise ValueError("strokes need at least two points")
            clean.append(s)
        self.strokes = clean

    @property
    def empty(self) -> bool:
        return len(self.strokes) == 0

    def to_jsonable(self):
        return {"canvas": self.canvas, "width": self.width,
                "strokes": [s.tolist() for s in self.strokes]}

    @classmethod
    def from_jsonable(cls, d):
        return cls(canvas=d["canvas"], strokes=d.get("strokes", []),
                   width=d.get("width", 1.5))


def rasterize(stroke_set: StrokeSet, resolution: int) -> np.ndarray:
    """Antialiased dark-on-white raster of polyline strokes. Canvas coordinates
    are continuous in [0, resolution]; pixel (i, j) is centered at
    (j + 0.5, i + 0.5). Deterministic."""
    img = np.full((resolution, resolution), 255.0)
    r = max(stroke_set.width, 0.5) / 2.0
    for stroke in stroke_set.strokes:
        for p0, p1 in zip(stroke[:-1], stroke[1:]):
            x0, y0 = p0
            x1, y1 = p1
            lo_x = max(0, int(np.floor(min(x0, x1) - r - 1)))
            hi_x = min(resolution - 1, int(np.ceil(max(x0, x1) + r + 1)))
            lo_y = max(0, int(np.floor(min(y0, y1) - r - 1)))
            hi_y = min(resolution - 1, int(np.ceil(max(y0, y1) + r + 1)))
            if lo_x > hi_x or lo_y > hi_y:
                continue
            xs = np.arange(lo_x, hi_x + 1) + 0.5
            ys = np.arange(lo_y, hi_y + 1) + 0.5
            gx, gy = np.meshgrid(xs, ys)
            dx, dy = x1 - x0, y1 - y0
            l2 = dx * dx + dy * dy
            if l2 == 0:
                cx, cy = x0, y0
            else:
                t = np.clip(((gx - x0) * dx + (gy - y0) * dy) / l2, 0.0, 1.0)
                cx = x0 + t * dx
                cy = y0 + t * dy
            dist = np.hypot(gx - cx, gy - cy)
            val = np.clip(dist - r + 0.5, 0.0, 1.0) * 255.0
            region = img[lo_y:hi_y + 1, lo_x:hi_x + 1]
            np.minimum(region, val, out=region)
    return np.round(img).astype(np.uint8)


def resample_mask(mask: np.ndarray, n: int) -> np.ndarray:
    """Nearest-neighbor resample of a binary mask to an n x n grid."""
    h, w = mask.shape
    ri = ((np.arange(n) + 0.5) * h / n).astype(int).clip(0, h - 1)
    ci = ((np.arange(n) + 0.5) * w / n).astype(int).clip(0, w - 1)
    return mask[np.ix_(ri, ci)]


def resample_labels(labels: np.ndarray, n: int) -> np.ndarray:
    """Nearest-neighbor label resample that never loses an instance: any label
    whose cells all vanish is re-stamped at its centroid cell."""
    out = resample_mask(labels, n).copy()
    h, w = labels.shape
    for lab in range(1, int(labels.max()) + 1):
        if (out == lab).any():
            continue
        ii, jj = np.nonzero(labels == lab)
        if len(ii) == 0:
            continue
        r = int(ii.mean() * n / h)
        c = int(jj.mean() * n / w)
        out[min(r, n - 1), min(c, n - 1)] = lab
    return out


class ModelBundle:
    """All trained modules plus the fixed camera rig, loaded once and shared
    read-only across reconstructions."""

    def __init__(self, mask_ckpt, depth_ckpt, diffusion_ckpt):
        mask_hdr, mask_state = load_checkpoint(mask_ckpt)
        depth_hdr, depth_state = load_checkpoint(depth_ckpt)
        diff_hdr, diff_state = load_checkpoint(diffusion_ckpt)
        hashes = {mask_hdr["config_hash"], depth_hdr["config_hash"], diff_hdr["config_hash"]}
        if len(hashes) != 1:
            raise ReconstructionError("checkpoints were built with different configs")
        self.cfg = PipelineConfig.from_dict(mask_hdr["config"])

        self.mask_net = MaskNet(self.cfg.net)
        self.mask_net.load_state_dict(mask_state["mask"])
        self.depth_variant = depth_hdr["extra"].get("variant", "ov")
        self.magnitude = depth_hdr["extra"].get(
            "occupancy_magnitude", self.cfg.net.occupancy_magnitude)
        self.depth_net = DepthNet(
            self.cfg.net, variant=self.depth_variant,
            depth_init=depth_hdr["extra"].get("depth_init", 125.0),
            depth_scale=depth_hdr["extra"].get("depth_scale", 125.0),
        )
        self.depth_net.load_state_dict(depth_state["depth"])

        self.timesteps = diff_hdr["extra"].get("timesteps", self.cfg.schedule.timesteps)
        self.schedule = NoiseSchedule(self.timesteps, self.cfg.schedule.beta_start,
                                      self.cfg.schedule.beta_end)
        n = self.cfg.raster.heightfield_n
        self.latent_res = n // self.cfg.net.latent_downsample
        self.ae = DepthAutoencoder(self.cfg.net)
        self.sketch_enc = SketchCondEncoder(self.cfg.net, self.cfg.raster.resolution,
                                            self.latent_res)
        self.denoiser = Denoiser(self.cfg.net, timesteps=self.timesteps)
        self.ae.load_state_dict(diff_state["ae"])
        self.sketch_enc.load_state_dict(diff_state["sketch_enc"])
        self.denoiser.load_state_dict(diff_state["den"])
        for m in (self.mask_net, self.depth_net, self.ae, self.sketch_enc, self.denoiser):
            m.eval()

        # fixed rig: scene geometry only depends on the patch extent
        flat = Scene(extent=self.cfg.scene.extent, seed=0, buildings=[])
        self.cam_p, self.cam_t = place_cameras(
            flat, self.cfg.camera, self.cfg.raster.resolution)
        self.extra_cams = [extra_view(flat, self.cfg.camera, self.cfg.raster.resolution)]

    @classmethod
    def from_dir(cls, ckpt_dir) -> "ModelBundle":
        d = Path(ckpt_dir)
        mask = d / "mask.pt"
        depth = d / "depth_ov.pt"
        if not depth.exists():
            depth = d / "depth_mono.pt"
        diff = d / "diffusion_pt.pt"
        if not diff.exists():
            diff = d / "diffusion_fs.pt"
        for p in (mask, depth, diff):
            if not p.exists():
                raise ReconstructionError(f"missing checkpoint: {p}")
        return cls(mask, depth, diff)

    def perspective_camera(self, view: int) -> PerspectiveCamera:
        if view == 0:
            return self.cam_p
        if view - 1 < len(self.extra_cams):
            return self.extra_cams[view - 1]
        raise ReconstructionError(f"no camera configured for view {view}")

    # ----------------------------------------------------------- components

    def predict_mask(self, s_t: np.ndarray):
        x = torch.from_numpy((1.0 - s_t / 255.0).astype(np.float32))[None, None]
        with torch.no_grad():
            logits = self.mask_net(x)
        m_t = (torch.sigmoid(logits)[0, 0].numpy() > 0.5).astype(np.uint8)
        return m_t

    def predict_perspective_depth(self, s_p: np.ndarray, m_t: np.ndarray,
                                  cam_p: PerspectiveCamera):
        x = torch.from_numpy((1.0 - s_p / 255.0).astype(np.float32))[None, None]
        vol = None
        if self.depth_variant == "ov":
            ov = build_occupancy_volume(m_t, self.cam_t, cam_p,
                                        self.cfg.net.n_planes, self.magnitude)
            vol = torch.from_numpy(ov)[None]
        with torch.no_grad():
            depths, fg_logits = self.depth_net(x, vol)
        d_p = depths[-1][0, 0].numpy().astype(np.float64)
        m_p = (torch.sigmoid(fg_logits)[0, 0].numpy() > 0.5).astype(np.uint8)
        return d_p, m_p

    def complete_heightfield(self, s_t: np.ndarray, cond_depth: np.ndarray,
                             cond_valid: np.ndarray, seed: int, steps: int):
        dr = self.cfg.depth_range
        x_t = torch.from_numpy((1.0 - s_t / 255.0).astype(np.float32))[None, None]
        cond = torch.from_numpy(np.stack([
            dr.normalize(cond_depth), cond_valid]).astype(np.float32))[None]
        with torch.no_grad():
            c_s = self.sketch_enc(x_t)
            c_d = self.ae.encode(cond, sample=False)

            def eps_fn(z, k):
                return self.denoiser(z, c_s, c_d, torch.full((z.shape[0],), k,
                                                             dtype=torch.long))

            g = torch.Generator().manual_seed(seed)
            shape = (1, self.cfg.net.latent_channels, self.latent_res, self.latent_res)
            z0 = ddim_sample(eps_fn, shape, self.schedule, steps, generator=g)
            decoded = self.ae.decode(z0)
        d_t = dr.denormalize(decoded[0, 0].numpy().astype(np.float64))
        return d_t

    # -------------------------------------------------------------- pipeline

    def reconstruct(self, s_t: np.ndarray, s_p_views: list[np.ndarray],
                    seed: int = 0, steps: int | None = None,
                    views: list[int] | None = None) -> dict:
        """Full pipeline on raster sketches. s_p_views[i] pairs with view index
        views[i] (default: single canonical view)."""
        t_start = time.perf_counter()
        steps = steps or self.cfg.schedule.sample_steps
        views = views if views is not None else [0]
        if len(views) != len(s_p_views):
            raise ReconstructionError("one perspective raster required per view")
        res = self.cfg.raster.resolution
        if s_t.shape != (res, res):
            raise ReconstructionError(f"top-down raster must be {res}x{res}")
        timings = {}

        t0 = time.perf_counter()
        m_t = self.predict_mask(s_t)
        m_star = connected_components(m_t)
        timings["mask_s"] = time.perf_counter() - t0

        n = self.cfg.raster.heightfield_n
        n_buildings = int(m_star.max())
        d_p_out, m_p_out = [], []

        if n_buildings == 0:
            # empty layout: flat ground, no need to run completion
            ground = float(self.cam_t.height)
            d_t = np.full((n, n), ground)
            cond_depth = d_t.copy()
            cond_valid = np.ones((n, n), dtype=np.float32)
            timings["depth_s"] = timings["diffusion_s"] = 0.0
        else:
            t0 = time.perf_counter()
            view_fields = []
            for view, s_p in zip(views, s_p_views):
                cam_v = self.perspective_camera(view)
                if s_p.shape != (res, res):
                    raise ReconstructionError(f"perspective raster must be {res}x{res}")
                d_p, m_p = self.predict_perspective_depth(s_p, m_t, cam_v)
                if not np.isfinite(d_p[m_p > 0]).all():
                    raise ReconstructionError("depth network produced non-finite values")
                d_p_out.append(d_p)
                m_p_out.append(m_p)
                points = backproject_depth(d_p, m_p, cam_v)
                view_fields.append(project_to_heightfield(points, self.cam_t, n))
            timings["depth_s"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            hf = fuse_heightfields(view_fields)
            m_t_n = resample_mask(m_t, n)
            hf = clamp_heightfield(hf, m_t_n, ground_depth=float(self.cam_t.height))
            cond_depth = np.where(hf.valid, hf.values, self.cam_t.height)
            cond_valid = hf.valid.astype(np.float32)
            d_t = self.complete_heightfield(s_t, cond_depth, cond_valid, seed, steps)
            if not np.isfinite(d_t).all():
                raise ReconstructionError("completion produced non-finite depths")
            timings["diffusion_s"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        labels_n = resample_labels(m_star, n)
        pitch = 2.0 * self.cam_t.half_extent / n
        hf_final = Heightfield(
            values=d_t, valid=np.ones((n, n), dtype=bool),
            x0=self.cam_t.x0, y1=self.cam_t.y1, pitch=pitch,
            ortho_height=float(self.cam_t.height),
        )
        d_ground = float(d_t.max())
        mesh = heightfield_to_mesh(hf_final, d_ground, labels=labels_n)
        timings["mesh_s"] = time.perf_counter() - t0
        timings["total_s"] = time.perf_counter() - t_start

        return {
            "m_t": m_t, "m_star": m_star, "d_p": d_p_out, "m_p": m_p_out,
            "d_t": d_t, "condition_depth": cond_depth, "condition_valid": cond_valid,
            "mesh": mesh, "labels_n": labels_n, "n_buildings": n_buildings,
            "d_ground": d_ground, "seed": seed, "steps": steps, "views": views,
            "timings": timings,
        }

    def layout_preview(self, s_t: np.ndarray | None = None,
                       m_t: np.ndarray | None = None,
                       height: float = 20.0) -> dict:
        """Constant-height extrusion of the (predicted) footprints."""
        if m_t is None:
            if s_t is None:
                raise ReconstructionError("need a sketch or a mask")
            m_t = self.predict_mask(s_t)
        m_star = connected_components(m_t)
        n = self.cfg.raster.heightfield_n
        m_n = resample_mask(m_t, n)
        ground = float(self.cam_t.height)
        values = np.where(m_n > 0, ground - height, ground).astype(np.float64)
        pitch = 2.0 * self.cam_t.half_extent / n
        hf = Heightfield(values=values, valid=np.ones((n, n), dtype=bool),
                         x0=self.cam_t.x0, y1=self.cam_t.y1, pitch=pitch,
                         ortho_height=ground)
        labels_n = resample_labels(m_star, n)
        mesh = heightfield_to_mesh(hf, d_ground=ground, labels=labels_n)
        return {"mesh": mesh, "m_t": m_t, "m_star": m_star,
                "n_buildings": int(m_star.max())}

    def project_topdown_strokes(self, strokes: StrokeSet, view: int = 0) -> list:
        if strokes.canvas != "topdown":
            raise ValueError("projection source must be the top-down canvas")
        return project_strokes(strokes.strokes, self.cam_t, self.perspective_camera(view))
