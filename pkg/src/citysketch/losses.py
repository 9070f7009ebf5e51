"""Training objectives: weighted mask BCE, multi-scale depth and gradient
losses, normal-map losses (with differentiable normal estimation), and the
diffusion noise/auxiliary objectives.

All reductions are means over contributing (valid) pixels, so values are
comparable across resolutions and batch sizes.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .config import LossWeights

LOG_EPS = 1e-7


def weighted_bce(logits: torch.Tensor, target: torch.Tensor,
                 w_ground: float, w_building: float) -> torch.Tensor:
    """Class-weighted binary cross entropy on probabilities sigma(logits)."""
    if logits.shape != target.shape:
        raise ValueError("logit/target shape mismatch")
    p = torch.sigmoid(logits).clamp(LOG_EPS, 1.0 - LOG_EPS)
    y = target
    loss = -(w_building * y * torch.log(p) + w_ground * (1.0 - y) * torch.log(1.0 - p))
    return loss.mean()


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    denom = mask.sum()
    if denom == 0:
        return x.sum() * 0.0
    return (x * mask).sum() / denom


def pool_depth(gt: torch.Tensor, valid: torch.Tensor, size: int):
    """Average-pool ground truth depth over valid pixels down to size x size."""
    factor = gt.shape[-1] // size
    if factor == 1:
        return gt, valid
    s = F.avg_pool2d(gt * valid, factor)
    c = F.avg_pool2d(valid, factor)
    pooled = s / c.clamp(min=1e-12)
    v = (c > 0).to(gt.dtype)
    return pooled * v, v


def multiscale_depth_loss(preds: list[torch.Tensor], gt: torch.Tensor,
                          valid: torch.Tensor) -> torch.Tensor:
    """Sum over scales of the mean masked L1 against pooled ground truth."""
    total = gt.sum() * 0.0
    for p in preds:
        g, v = pool_depth(gt, valid, p.shape[-1])
        total = total + masked_mean((p - g).abs(), v)
    return total


def grad_loss(preds: list[torch.Tensor], gt: torch.Tensor,
              valid: torch.Tensor) -> torch.Tensor:
    """Sum over scales of mean |forward-difference| of the residual, x and y."""
    total = gt.sum() * 0.0
    for p in preds:
        g, v = pool_depth(gt, valid, p.shape[-1])
        r = p - g
        rx = r[..., :, 1:] - r[..., :, :-1]
        vx = v[..., :, 1:] * v[..., :, :-1]
        ry = r[..., 1:, :] - r[..., :-1, :]
        vy = v[..., 1:, :] * v[..., :-1, :]
        total = total + masked_mean(rx.abs(), vx) + masked_mean(ry.abs(), vy)
    return total


def normal_loss(n_pred: torch.Tensor, n_gt: torch.Tensor,
                valid: torch.Tensor) -> torch.Tensor:
    """Mean over valid pixels of (1 - cosine similarity); unit inputs assumed."""
    dot = (n_pred * n_gt).sum(1, keepdim=True)
    return masked_mean(1.0 - dot, valid)


def _masked_diff(p: torch.Tensor, valid: torch.Tensor, dim: int):
    """Central/one-sided derivative of a position map (B, 3, H, W) along an
    image dim with validity handling; returns (grad, ok)."""
    fwd = torch.roll(p, -1, dims=dim) - p
    bwd = p - torch.roll(p, 1, dims=dim)
    vf = torch.roll(valid, -1, dims=dim) * valid
    vb = torch.roll(valid, 1, dims=dim) * valid
    if dim in (-1, 3):
        vf[..., :, -1] = 0
        vb[..., :, 0] = 0
    else:
        vf[..., -1, :] = 0
        vb[..., 0, :] = 0
    both = vf * vb
    grad = both * 0.5 * (fwd + bwd) + vf * (1 - vb) * fwd + vb * (1 - vf) * bwd
    ok = ((vf + vb) > 0).to(p.dtype)
    return grad, ok


def _normals_from_positions(pos: torch.Tensor, valid: torch.Tensor, to_cam: torch.Tensor):
    gx, okx = _masked_diff(pos, valid, dim=3)
    gy, oky = _masked_diff(pos, valid, dim=2)
    n = torch.cross(gx, gy, dim=1)
    norm = n.norm(dim=1, keepdim=True)
    ok = valid * okx * oky * (norm > 1e-12).to(pos.dtype)
    n = n / norm.clamp(min=1e-12)
    sign = torch.sign((n * to_cam).sum(1, keepdim=True))
    sign = torch.where(sign == 0, torch.ones_like(sign), sign)
    return n * sign, ok


def perspective_normals(depth: torch.Tensor, valid: torch.Tensor,
                        fx: float, fy: float, cx: float, cy: float):
    """Unit normals in camera space from a (B, 1, H, W) depth map; orientation
    toward the camera. Returns (normals (B, 3, H, W), ok mask)."""
    b, _, h, w = depth.shape
    u = torch.arange(w, dtype=depth.dtype).view(1, 1, 1, w)
    v = torch.arange(h, dtype=depth.dtype).view(1, 1, h, 1)
    x = (u - cx) / fx * depth
    y = (v - cy) / fy * depth
    pos = torch.cat([x, y, depth], dim=1)
    return _normals_from_positions(pos, valid, to_cam=-pos)


def ortho_normals(depth: torch.Tensor, pitch: float,
                  valid: torch.Tensor | None = None):
    """Unit normals of a top-down depth grid (camera straight above)."""
    b, _, h, w = depth.shape
    if valid is None:
        valid = torch.ones_like(depth)
    x = (torch.arange(w, dtype=depth.dtype) * pitch).view(1, 1, 1, w).expand(b, 1, h, w)
    y = (-torch.arange(h, dtype=depth.dtype) * pitch).view(1, 1, h, 1).expand(b, 1, h, w)
    pos = torch.cat([x, y, -depth], dim=1)
    up = torch.zeros_like(pos)
    up[:, 2] = 1.0
    return _normals_from_positions(pos, valid, to_cam=up)


def depth_total_loss(
    preds: list[torch.Tensor],
    mask_logits: torch.Tensor,
    gt_depth: torch.Tensor,
    gt_valid: torch.Tensor,
    gt_fg: torch.Tensor,
    intrinsics: tuple[float, float, float, float],
    weights: LossWeights,
) -> dict:
    """Weighted sum of the four perspective-depth terms, components included."""
    fx, fy, cx, cy = intrinsics
    out = {}
    out["depth"] = multiscale_depth_loss(preds, gt_depth, gt_valid)
    out["grad"] = grad_loss(preds, gt_depth, gt_valid)
    fine = preds[-1]
    n_pred, ok_p = perspective_normals(fine, gt_valid, fx, fy, cx, cy)
    with torch.no_grad():
        n_gt, ok_g = perspective_normals(gt_depth, gt_valid, fx, fy, cx, cy)
    out["normal"] = normal_loss(n_pred, n_gt, ok_p * ok_g)
    out["mask"] = weighted_bce(mask_logits, gt_fg, weights.ground_class, weights.building_class)
    out["total"] = (
        weights.depth * out["depth"] + weights.grad * out["grad"]
        + weights.normal * out["normal"] + weights.mask * out["mask"]
    )
    return out


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise maps."""
    return F.mse_loss(eps_hat, eps)


def diffusion_aux_losses(pred_depth: torch.Tensor, gt_depth: torch.Tensor,
                         pitch: float) -> tuple:
    """Pixel-space L1 / L2 and the top-down normal loss on decoded depths."""
    l1 = (pred_depth - gt_depth).abs().mean()
    l2 = ((pred_depth - gt_depth) ** 2).mean()
    n_pred, ok_p = ortho_normals(pred_depth, pitch)
    with torch.no_grad():
        n_gt, ok_g = ortho_normals(gt_depth, pitch)
    ln = normal_loss(n_pred, n_gt, ok_p * ok_g)
    return l1, l2, ln
