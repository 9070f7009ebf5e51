"""Deterministic geometric core: occupancy volume construction, depth
backprojection, heightfield binning and meshing, normal maps, connected
components, and stroke projection between the two canvases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import OrthoCamera, PerspectiveCamera


@dataclass
class Heightfield:
    """Top-down depth grid. values[i, j] is the depth (ortho camera height minus
    surface height) at the cell center; row 0 is the north edge."""

    values: np.ndarray
    valid: np.ndarray
    x0: float
    y1: float
    pitch: float
    ortho_height: float
    ground_depth: float | None = None

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def cell_xy(self, row, col):
        x = self.x0 + (np.asarray(col) + 0.5) * self.pitch
        y = self.y1 - (np.asarray(row) + 0.5) * self.pitch
        return x, y


@dataclass
class GridMesh:
    vertices: np.ndarray           # (n*n, 3)
    faces: np.ndarray              # (2*(n-1)^2, 3) int
    n: int
    labels: np.ndarray | None = None  # (n*n,) per-vertex instance ids


def build_occupancy_volume(
    mask_top: np.ndarray,
    cam_t: OrthoCamera,
    cam_p: PerspectiveCamera,
    n_planes: int,
    magnitude: float,
) -> np.ndarray:
    """Frustum-aligned occupancy volume of shape (n_planes, H, W).

    The perspective frustum is sliced by n_planes equidistant depth planes
    between the near and far clip distances. Each voxel takes +magnitude when
    its center projects onto an occupied top-down cell and -magnitude otherwise
    (including anywhere outside the top-down footprint).
    """
    if n_planes < 2:
        raise ValueError("need at least two depth planes")
    if cam_p.fx <= 0 or cam_p.fy <= 0 or not np.isfinite([cam_p.fx, cam_p.fy]).all():
        raise ValueError("degenerate perspective intrinsics")
    mask_top = np.asarray(mask_top)
    n_mask = mask_top.shape[0]
    depths = np.linspace(cam_p.near, cam_p.far, n_planes)

    rays = cam_p.pixel_rays()                      # (H, W, 3), z-depth param
    pts = cam_p.origin + rays[None] * depths[:, None, None, None]   # (n, H, W, 3)
    row, col = cam_t.world_to_cell(pts[..., 0], pts[..., 1], n=n_mask)
    inside = (row >= 0) & (row < n_mask) & (col >= 0) & (col < n_mask)
    occ = np.zeros(row.shape, dtype=bool)
    occ[inside] = mask_top[row[inside], col[inside]] > 0
    return np.where(occ, magnitude, -magnitude).astype(np.float32)


def backproject_depth(
    depth: np.ndarray, mask: np.ndarray, cam_p: PerspectiveCamera
) -> np.ndarray:
    """World points for every foreground pixel with finite depth; (K, 3)."""
    m = np.asarray(mask) > 0
    m &= np.isfinite(depth)
    if not m.any():
        return np.zeros((0, 3))
    v, u = np.nonzero(m)
    return cam_p.backproject(u.astype(np.float64), v.astype(np.float64), depth[m])


def project_to_heightfield(
    points: np.ndarray, cam_t: OrthoCamera, n: int
) -> Heightfield:
    """Bin world points into the top-down grid; each cell keeps the smallest
    depth (highest surface). Cells with no points are invalid."""
    pitch = 2.0 * cam_t.half_extent / n
    values = np.full((n, n), np.inf)
    points = np.asarray(points).reshape(-1, 3)
    if len(points):
        row, col = cam_t.world_to_cell(points[:, 0], points[:, 1], n=n)
        inside = (row >= 0) & (row < n) & (col >= 0) & (col < n)
        d = np.clip(cam_t.height - points[inside, 2], 0.0, cam_t.height)
        np.minimum.at(values, (row[inside], col[inside]), d)
    valid = np.isfinite(values)
    values[~valid] = np.nan
    return Heightfield(
        values=values, valid=valid, x0=cam_t.x0, y1=cam_t.y1,
        pitch=pitch, ortho_height=cam_t.height,
    )


def fuse_heightfields(hfs: list) -> Heightfield:
    """Combine per-view partial heightfields: cells valid in several views
    average their estimates (each view already kept its own nearest surface),
    cells valid in one view pass through."""
    if not hfs:
        raise ValueError("nothing to fuse")
    if len(hfs) == 1:
        return hfs[0]
    first = hfs[0]
    total = np.zeros_like(first.values)
    count = np.zeros_like(first.values)
    for hf in hfs:
        if hf.values.shape != first.values.shape:
            raise ValueError("heightfield grids differ")
        total += np.where(hf.valid, hf.values, 0.0)
        count += hf.valid
    valid = count > 0
    values = np.full_like(total, np.nan)
    values[valid] = total[valid] / count[valid]
    return Heightfield(values=values, valid=valid, x0=first.x0, y1=first.y1,
                       pitch=first.pitch, ortho_height=first.ortho_height)


def clamp_heightfield(
    hf: Heightfield, mask_occ: np.ndarray, ground_depth: float
) -> Heightfield:
    """Overwrite every cell outside the occupied mask with the ground depth.
    Invalid cells inside occupied regions stay invalid (unobserved rooftops)."""
    mask_occ = np.asarray(mask_occ) > 0
    if mask_occ.shape != hf.values.shape:
        raise ValueError("mask and heightfield grids are not aligned")
    values = hf.values.copy()
    valid = hf.valid.copy()
    outside = ~mask_occ
    values[outside] = ground_depth
    valid[outside] = True
    return Heightfield(
        values=values, valid=valid, x0=hf.x0, y1=hf.y1, pitch=hf.pitch,
        ortho_height=hf.ortho_height, ground_depth=ground_depth,
    )


def _masked_gradient(p: np.ndarray, valid: np.ndarray, axis: int):
    """Per-pixel derivative of a (H, W, 3) position map along an image axis:
    central where both neighbors are valid, one-sided at borders/mask edges."""
    fwd = np.roll(p, -1, axis=axis) - p
    bwd = p - np.roll(p, 1, axis=axis)
    vf = np.roll(valid, -1, axis=axis) & valid
    vb = np.roll(valid, 1, axis=axis) & valid
    # roll wraps around; kill the wrapped entries
    if axis == 0:
        vf[-1, :] = False
        vb[0, :] = False
    else:
        vf[:, -1] = False
        vb[:, 0] = False
    grad = np.zeros_like(p)
    both = vf & vb
    grad[both] = 0.5 * (fwd + bwd)[both]
    fo = vf & ~vb
    grad[fo] = fwd[fo]
    bo = vb & ~vf
    grad[bo] = bwd[bo]
    ok = vf | vb
    return grad, ok


def normals_from_depth(depth: np.ndarray, cam) -> np.ndarray:
    """Unit world-space normals from a depth map, oriented toward the camera.
    Invalid pixels (and pixels with no valid neighbor) are NaN."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth)
    h, w = depth.shape
    if isinstance(cam, OrthoCamera):
        xx, yy = cam.cell_centers(n=h)
        z = cam.height - np.where(valid, depth, 0.0)
        pos = np.stack([xx, yy, z], axis=-1)
        to_cam = np.array([0.0, 0.0, 1.0])
        to_cam = np.broadcast_to(to_cam, pos.shape)
    else:
        rays = cam.pixel_rays()
        pos = cam.origin + rays * np.where(valid, depth, 1.0)[..., None]
        to_cam = cam.origin - pos
    didj, ok_j = _masked_gradient(pos, valid, axis=1)
    didi, ok_i = _masked_gradient(pos, valid, axis=0)
    n = np.cross(didj, didi)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    ok = valid & ok_i & ok_j & (norm[..., 0] > 1e-12)
    n = np.where(norm > 1e-12, n / np.maximum(norm, 1e-12), 0.0)
    flip = (n * to_cam).sum(-1) < 0
    n[flip] = -n[flip]
    n[~ok] = np.nan
    return n


def connected_components(mask: np.ndarray) -> np.ndarray:
    """8-connected component labeling. Labels 1..K in order of first occurrence
    in row-major scan; background stays 0."""
    mask = np.asarray(mask) > 0
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    parent = [0]  # union-find over provisional labels

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    nxt = 1
    for i in range(h):
        row = mask[i]
        for j in range(w):
            if not row[j]:
                continue
            neigh = []
            if i > 0:
                if j > 0 and labels[i - 1, j - 1]:
                    neigh.append(labels[i - 1, j - 1])
                if labels[i - 1, j]:
                    neigh.append(labels[i - 1, j])
                if j + 1 < w and labels[i - 1, j + 1]:
                    neigh.append(labels[i - 1, j + 1])
            if j > 0 and labels[i, j - 1]:
                neigh.append(labels[i, j - 1])
            if not neigh:
                labels[i, j] = nxt
                parent.append(nxt)
                nxt += 1
            else:
                m = min(neigh)
                labels[i, j] = m
                for other in neigh:
                    union(m, other)
    # second pass: resolve to roots, then relabel by first occurrence
    remap = {}
    out = np.zeros_like(labels)
    k = 0
    for i in range(h):
        for j in range(w):
            lab = labels[i, j]
            if not lab:
                continue
            root = find(lab)
            if root not in remap:
                k += 1
                remap[root] = k
            out[i, j] = remap[root]
    return out


def heightfield_to_mesh(
    hf: Heightfield, d_ground: float, labels: np.ndarray | None = None
) -> GridMesh:
    """Regular grid mesh with vertex height d_ground - depth at each cell center."""
    if not hf.valid.all():
        raise ValueError("heightfield must be fully valid before meshing")
    n = hf.n
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    x, y = hf.cell_xy(ii, jj)
    z = d_ground - hf.values
    vertices = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=-1)

    idx = np.arange(n * n).reshape(n, n)
    a = idx[:-1, :-1].ravel()   # NW
    b = idx[:-1, 1:].ravel()    # NE
    c = idx[1:, :-1].ravel()    # SW
    d = idx[1:, 1:].ravel()     # SE
    faces = np.concatenate(
        [np.stack([a, c, d], axis=-1), np.stack([a, d, b], axis=-1)], axis=0
    ).astype(np.int64)

    lab = None
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (n, n):
            raise ValueError("label grid must match the heightfield grid")
        lab = labels.ravel().astype(np.int32)
    return GridMesh(vertices=vertices, faces=faces, n=n, labels=lab)


_PALETTE = np.array(
    [
        [0.78, 0.78, 0.78],
        [0.894, 0.102, 0.110], [0.216, 0.494, 0.722], [0.302, 0.686, 0.290],
        [0.596, 0.306, 0.639], [1.000, 0.498, 0.000], [1.000, 1.000, 0.200],
        [0.651, 0.337, 0.157], [0.969, 0.506, 0.749], [0.600, 0.600, 0.600],
    ]
)


def label_colors(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    idx = np.where(labels > 0, (labels - 1) % (len(_PALETTE) - 1) + 1, 0)
    return _PALETTE[idx]


def write_obj(mesh: GridMesh, path_or_file) -> None:
    """OBJ export; per-vertex colors (from instance labels) use the common
    `v x y z r g b` extension. Accepts a path or a writable text file."""
    colors = label_colors(mesh.labels) if mesh.labels is not None else None

    def emit(f):
        for i, v in enumerate(mesh.vertices):
            if colors is None:
                f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
            else:
                c = colors[i]
                f.write(
                    f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]:.4f} {c[1]:.4f} {c[2]:.4f}\n"
                )
        for face in mesh.faces:
            f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w") as f:
            emit(f)


def canvas_to_world_top(pts: np.ndarray, cam_t: OrthoCamera) -> np.ndarray:
    """Continuous top-down canvas coords (x right, y down, in [0, grid_size])
    to world points on the ground plane."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    pitch = 2.0 * cam_t.half_extent / cam_t.grid_size
    x = cam_t.x0 + pts[:, 0] * pitch
    y = cam_t.y1 - pts[:, 1] * pitch
    return np.stack([x, y, np.zeros_like(x)], axis=-1)


def world_to_canvas_top(pts: np.ndarray, cam_t: OrthoCamera) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    pitch = 2.0 * cam_t.half_extent / cam_t.grid_size
    px = (pts[:, 0] - cam_t.x0) / pitch
    py = (cam_t.y1 - pts[:, 1]) / pitch
    return np.stack([px, py], axis=-1)


def project_strokes(
    strokes: list, cam_t: OrthoCamera, cam_p: PerspectiveCamera
) -> list:
    """Map top-down canvas polylines onto the perspective canvas through the
    ground plane. Points behind the camera or outside the frustum are dropped,
    splitting polylines into visible runs."""
    out = []
    for stroke in strokes:
        stroke = np.asarray(stroke, dtype=np.float64).reshape(-1, 2)
        if len(stroke) == 0:
            continue
        world = canvas_to_world_top(stroke, cam_t)
        u, v, z = cam_p.project(world)
        keep = (z >= cam_p.near) & (z <= cam_p.far) & cam_p.in_image(u, v)
        canvas = np.stack([u + 0.5, v + 0.5], axis=-1)
        run: list = []
        for k in range(len(stroke)):
            if keep[k]:
                run.append(canvas[k])
            else:
                if len(run) >= 2:
                    out.append(np.array(run))
                run = []
        if len(run) >= 2:
            out.append(np.array(run))
    return out
