import math

import numpy as np
import pytest
import torch

from citysketch.config import LossWeights
from citysketch.losses import (
    diffusion_aux_losses, diffusion_loss, depth_total_loss, grad_loss,
    multiscale_depth_loss, normal_loss, ortho_normals, perspective_normals,
    pool_depth, weighted_bce,
)

torch.manual_seed(0)


def _rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


# --------------------------------------------------------------- weighted BCE

def test_bce_perfect_prediction_vanishes():
    y = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
    logits = (y * 2 - 1) * 50.0  # saturated
    assert weighted_bce(logits, y, 1.0, 20.0).item() < 1e-5


def test_bce_single_pixel_reference_value():
    # one building pixel predicted at p = 0.5 with class weight 20
    logits = torch.zeros(1, 1)
    y = torch.ones(1, 1)
    val = weighted_bce(logits, y, 1.0, 20.0).item()
    assert val == pytest.approx(20.0 * math.log(2.0), rel=1e-6)


def test_bce_equal_weights_match_plain_bce():
    logits = _rand(2, 1, 8, 8, seed=1)
    y = (_rand(2, 1, 8, 8, seed=2) > 0).double()
    ours = weighted_bce(logits, y, 1.0, 1.0)
    ref = torch.nn.functional.binary_cross_entropy_with_logits(logits, y)
    assert abs(ours.item() - ref.item()) < 1e-6


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        weighted_bce(torch.zeros(2, 2), torch.zeros(3, 3), 1.0, 1.0)


# ------------------------------------------------------------ multiscale depth

def _pyramid(gt, valid, scales):
    outs = []
    for s in range(scales - 1, -1, -1):
        size = gt.shape[-1] // (2 ** s)
        g, v = pool_depth(gt, valid, size)
        outs.append((g, v))
    return outs


def test_multiscale_zero_for_exact_prediction():
    gt = _rand(1, 1, 16, 16, seed=3).abs() + 1
    valid = torch.ones_like(gt)
    preds = [g for g, _ in _pyramid(gt, valid, 3)]
    assert multiscale_depth_loss(preds, gt, valid).item() == pytest.approx(0.0, abs=1e-12)


def test_multiscale_constant_offset():
    gt = _rand(1, 1, 16, 16, seed=4).abs() + 1
    valid = torch.ones_like(gt)
    delta = 0.37
    preds = [g + delta for g, _ in _pyramid(gt, valid, 4)]
    val = multiscale_depth_loss(preds, gt, valid).item()
    assert val == pytest.approx(4 * delta, rel=1e-9)


def test_multiscale_ignores_masked_pixels():
    gt = _rand(1, 1, 8, 8, seed=5).abs() + 1
    valid = torch.ones_like(gt)
    valid[..., :, :4] = 0.0
    pred = gt.clone()
    base = multiscale_depth_loss([pred], gt, valid).item()
    corrupted = gt.clone()
    corrupted[..., :, :4] += 100.0  # errors only under the mask
    assert multiscale_depth_loss([corrupted], gt, valid).item() == pytest.approx(base)


# -------------------------------------------------------------------- gradient

def test_grad_loss_offset_invariant():
    gt = _rand(1, 1, 16, 16, seed=6)
    valid = torch.ones_like(gt)
    assert grad_loss([gt + 5.0], gt, valid).item() == pytest.approx(0.0, abs=1e-12)
    assert grad_loss([gt.clone()], gt, valid).item() == pytest.approx(0.0, abs=1e-12)


def test_grad_loss_ramp_analytic():
    h = w = 16
    pitch = 0.5
    gt = torch.zeros(1, 1, h, w, dtype=torch.float64)
    valid = torch.ones_like(gt)
    m = 0.8  # residual slope per meter along x
    x = torch.arange(w, dtype=torch.float64) * pitch
    pred = x.view(1, 1, 1, w).expand(1, 1, h, w) * m
    val = grad_loss([pred], gt, valid).item()
    assert val == pytest.approx(m * pitch, rel=1e-9)


# --------------------------------------------------------------------- normals

def test_normal_loss_reference_values():
    n = torch.zeros(1, 3, 4, 4)
    n[:, 2] = 1.0
    valid = torch.ones(1, 1, 4, 4)
    assert normal_loss(n, n, valid).item() == pytest.approx(0.0)
    assert normal_loss(n, -n, valid).item() == pytest.approx(2.0)
    ortho = torch.zeros_like(n)
    ortho[:, 0] = 1.0
    assert normal_loss(n, ortho, valid).item() == pytest.approx(1.0)


def test_ortho_normals_flat_up():
    d = torch.full((1, 1, 8, 8), 120.0, dtype=torch.float64)
    n, ok = ortho_normals(d, pitch=1.5)
    assert ok.min() == 1
    assert torch.allclose(n[:, 2], torch.ones_like(n[:, 2]))


def test_torch_normals_agree_with_numpy_worldspace():
    from citysketch.cameras import make_perspective
    from citysketch.geometry import normals_from_depth
    cam = make_perspective((0, 0, 30.0), 45.0, -35.0, 55.0, 24, 24, 0.5, 400.0)
    rng = np.random.default_rng(0)
    # smooth positive depth surface
    base = 40 + 5 * np.sin(np.linspace(0, 2, 24))[None, :] + 3 * np.cos(np.linspace(0, 3, 24))[:, None]
    n_np = normals_from_depth(base, cam)
    d_t = torch.from_numpy(base).view(1, 1, 24, 24)
    n_t, ok = perspective_normals(d_t, torch.ones_like(d_t), cam.fx, cam.fy, cam.cx, cam.cy)
    # camera-space normals rotated to world must match the numpy implementation
    R = torch.from_numpy(cam.rotation)
    n_world = torch.einsum("ij,bjhw->bihw", R, n_t)[0].permute(1, 2, 0).numpy()
    sel = np.isfinite(n_np[..., 0]) & (ok[0, 0].numpy() > 0)
    dots = (n_world[sel] * n_np[sel]).sum(-1)
    assert np.abs(dots - 1.0).max() < 1e-6


# ------------------------------------------------------------------ total loss

def _fake_depth_batch(seed=0):
    g = torch.Generator().manual_seed(seed)
    gt = 50 + 10 * torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64)
    valid = (torch.rand(2, 1, 16, 16, generator=g) > 0.2).double()
    preds = []
    for s in (2, 1, 0):
        size = 16 // (2 ** s)
        preds.append(50 + 10 * torch.rand(2, 1, size, size, generator=g, dtype=torch.float64))
    logits = torch.randn(2, 1, 16, 16, generator=g, dtype=torch.float64)
    fg = (torch.rand(2, 1, 16, 16, generator=g) > 0.4).double()
    return preds, logits, gt, valid, fg


def test_depth_total_loss_zero_weights():
    preds, logits, gt, valid, fg = _fake_depth_batch()
    w = LossWeights(depth=0, grad=0, normal=0, mask=0)
    out = depth_total_loss(preds, logits, gt, valid, fg, (8.0, 8.0, 7.5, 7.5), w)
    assert out["total"].item() == 0.0


def test_depth_total_loss_selects_depth_term():
    preds, logits, gt, valid, fg = _fake_depth_batch()
    w = LossWeights(depth=1, grad=0, normal=0, mask=0)
    out = depth_total_loss(preds, logits, gt, valid, fg, (8.0, 8.0, 7.5, 7.5), w)
    direct = multiscale_depth_loss(preds, gt, valid)
    assert out["total"].item() == pytest.approx(direct.item(), rel=1e-12)


def test_depth_total_loss_recomposition():
    preds, logits, gt, valid, fg = _fake_depth_batch(seed=3)
    w = LossWeights(depth=0.7, grad=1.3, normal=0.5, mask=2.0)
    out = depth_total_loss(preds, logits, gt, valid, fg, (8.0, 8.0, 7.5, 7.5), w)
    total = (0.7 * out["depth"] + 1.3 * out["grad"] + 0.5 * out["normal"]
             + 2.0 * out["mask"]).item()
    assert out["total"].item() == pytest.approx(total, rel=1e-12)


# ------------------------------------------------------------------- diffusion

def test_diffusion_loss_values():
    eps = _rand(4, 4, seed=8)
    assert diffusion_loss(eps, eps).item() == 0.0
    g = torch.Generator().manual_seed(9)
    big = torch.randn(200, 200, generator=g)
    assert diffusion_loss(big, torch.zeros_like(big)).item() == pytest.approx(1.0, abs=0.02)
    r = _rand(6, 6, seed=10)
    assert diffusion_loss(2 * r, torch.zeros_like(r)).item() == pytest.approx(
        4 * diffusion_loss(r, torch.zeros_like(r)).item(), rel=1e-12)


def test_diffusion_aux_losses_reference():
    d = torch.full((1, 1, 8, 8), 100.0, dtype=torch.float64)
    l1, l2, ln = diffusion_aux_losses(d, d, pitch=1.0)
    assert (l1.item(), l2.item(), ln.item()) == (0.0, 0.0, 0.0)
    delta = 0.6
    l1, l2, ln = diffusion_aux_losses(d + delta, d, pitch=1.0)
    assert l1.item() == pytest.approx(delta, rel=1e-9)
    assert l2.item() == pytest.approx(delta ** 2, rel=1e-9)
    assert ln.item() == pytest.approx(0.0, abs=1e-12)  # flat offset keeps normals


# --------------------------------------------------- finite-difference gradients

def _fd_check(loss_fn, x, probes=6, h=1e-6, tol=1e-3):
    x = x.clone().requires_grad_(True)
    loss = loss_fn(x)
    loss.backward()
    g = x.grad
    rng = np.random.default_rng(0)
    flat = x.detach().reshape(-1)
    idx = rng.choice(flat.numel(), size=min(probes, flat.numel()), replace=False)
    for i in idx:
        e = torch.zeros_like(flat)
        e[i] = h
        e = e.reshape(x.shape)
        up = loss_fn(x.detach() + e).item()
        dn = loss_fn(x.detach() - e).item()
        fd = (up - dn) / (2 * h)
        an = g.reshape(-1)[i].item()
        if abs(fd) < 1e-9 and abs(an) < 1e-9:
            continue
        assert abs(fd - an) / max(abs(fd), abs(an)) < tol, (fd, an)


def test_gradients_match_finite_differences():
    gt = 50 + 10 * _rand(1, 1, 8, 8, seed=20).abs()
    valid = torch.ones_like(gt)
    y = (_rand(1, 1, 8, 8, seed=21) > 0).double()

    _fd_check(lambda x: weighted_bce(x, y, 1.0, 20.0), _rand(1, 1, 8, 8, seed=22))
    _fd_check(lambda x: multiscale_depth_loss([x], gt, valid),
              gt + 0.3 * _rand(1, 1, 8, 8, seed=23))
    _fd_check(lambda x: grad_loss([x], gt, valid), gt + 0.3 * _rand(1, 1, 8, 8, seed=24))
    _fd_check(lambda x: diffusion_loss(_rand(1, 1, 8, 8, seed=25), x),
              _rand(1, 1, 8, 8, seed=26))

    n_gt, _ = ortho_normals(gt, pitch=1.0)

    def nloss(x):
        n, ok = ortho_normals(x, pitch=1.0)
        return normal_loss(n, n_gt, ok)

    _fd_check(nloss, gt + 0.3 * _rand(1, 1, 8, 8, seed=27), h=1e-5)

    def aux(x):
        l1, l2, ln = diffusion_aux_losses(x, gt, pitch=1.0)
        return l1 + l2 + ln

    _fd_check(aux, gt + 0.3 * _rand(1, 1, 8, 8, seed=28), h=1e-5)
