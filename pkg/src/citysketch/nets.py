"""Network definitions at desk scale.

Trunks are nested-skip (UNet++-style) encoder-decoders with GroupNorm; the
perspective depth net takes the occupancy volume planes as input channels and
injects separately-encoded sketch features at every second encoder level. The
latent completion stack is a KL-regularized depth autoencoder, a sketch
condition encoder, and a timestep-conditioned denoiser over latents.
"""

from __future__ import annotations

import hashlib
import json
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import NetConfig


def _gn(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, c), c)


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1), _gn(c_out), nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1), _gn(c_out), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class NestedUNet(nn.Module):
    """Dense nested-skip encoder-decoder. Node (i, j) sits at 1/2^i resolution
    and sees all previous nodes of its row plus an upsampled deeper node.
    Returns the diagonal outputs coarse -> fine (one per resolution).

    With first_block_norm=False the stem keeps the raw input scale up to the
    first feature concatenation, so the occupancy-volume magnitude stays
    meaningful relative to the injected sketch features (the injection fuse is
    likewise unnormalized)."""

    def __init__(self, c_in: int, base: int, levels: int,
                 inject: dict[int, int] | None = None,
                 first_block_norm: bool = True):
        super().__init__()
        self.levels = levels
        self.widths = [base * (2 ** i) for i in range(levels + 1)]
        self.inject = inject or {}
        self.enc = nn.ModuleList()
        self.fuse = nn.ModuleDict()
        for i, w in enumerate(self.widths):
            cin = c_in if i == 0 else self.widths[i - 1]
            if i == 0 and not first_block_norm:
                self.enc.append(nn.Sequential(
                    nn.Conv2d(cin, w, 3, padding=1), nn.ReLU(inplace=True),
                    nn.Conv2d(w, w, 3, padding=1), nn.ReLU(inplace=True)))
            else:
                self.enc.append(ConvBlock(cin, w))
            if i in self.inject:
                self.fuse[str(i)] = nn.Sequential(
                    nn.Conv2d(w + self.inject[i], w, 1), nn.ReLU(inplace=True))
        self.dec = nn.ModuleDict()
        for j in range(1, levels + 1):
            for i in range(0, levels + 1 - j):
                cin = self.widths[i] * j + self.widths[i + 1]
                self.dec[f"{i}_{j}"] = ConvBlock(cin, self.widths[i])
        self.pool = nn.MaxPool2d(2)

    def forward(self, x, inject_feats: dict[int, torch.Tensor] | None = None):
        nodes: dict[tuple[int, int], torch.Tensor] = {}
        for i in range(self.levels + 1):
            h = x if i == 0 else self.pool(nodes[(i - 1, 0)])
            h = self.enc[i](h)
            if i in self.inject:
                if inject_feats is None or i not in inject_feats:
                    raise ValueError(f"missing injected features for level {i}")
                h = self.fuse[str(i)](torch.cat([h, inject_feats[i]], dim=1))
            nodes[(i, 0)] = h
        for j in range(1, self.levels + 1):
            for i in range(0, self.levels + 1 - j):
                up = F.interpolate(nodes[(i + 1, j - 1)], scale_factor=2, mode="nearest")
                cat = torch.cat([nodes[(i, jj)] for jj in range(j)] + [up], dim=1)
                nodes[(i, j)] = self.dec[f"{i}_{j}"](cat)
        return [nodes[(i, self.levels - i)] for i in range(self.levels, -1, -1)]


class MaskNet(nn.Module):
    """Top-down sketch -> per-pixel building occupancy logits."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.trunk = NestedUNet(1, cfg.base_width, cfg.levels)
        self.head = nn.Conv2d(cfg.base_width, 1, 1)

    def forward(self, sketch):
        if sketch.dim() != 4 or sketch.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) sketch, got {tuple(sketch.shape)}")
        feats = self.trunk(sketch)
        return self.head(feats[-1])


class SketchPyramid(nn.Module):
    """Multi-level sketch features matching the trunk's encoder resolutions,
    built only down to the deepest level that consumes them."""

    def __init__(self, base: int, levels: int):
        super().__init__()
        widths = [base * (2 ** i) for i in range(levels + 1)]
        self.blocks = nn.ModuleList()
        for i, w in enumerate(widths):
            cin = 1 if i == 0 else widths[i - 1]
            self.blocks.append(ConvBlock(cin, w))
        self.pool = nn.MaxPool2d(2)

    def forward(self, sketch):
        feats = []
        h = sketch
        for i, block in enumerate(self.blocks):
            if i > 0:
                h = self.pool(h)
            h = block(h)
            feats.append(h)
        return feats


class DepthNet(nn.Module):
    """Perspective sketch (+ occupancy volume) -> multi-scale depths and a
    foreground-mask logit map.

    variant "ov": occupancy planes are the trunk input; sketch features are
    concatenated at every second encoder level (0, 2, ...).
    variant "mono": the sketch raster alone is the trunk input.
    """

    def __init__(self, cfg: NetConfig, variant: str = "ov",
                 depth_init: float = 125.0, depth_scale: float = 125.0):
        super().__init__()
        if variant not in ("ov", "mono"):
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.cfg = cfg
        self.scales = cfg.scales
        self.depth_init = depth_init
        self.depth_scale = depth_scale
        if variant == "ov":
            inject_levels = {i: cfg.base_width * (2 ** i)
                             for i in range(0, cfg.levels + 1, 2)}
            self.sketch_enc = SketchPyramid(cfg.base_width, max(inject_levels))
            self.trunk = NestedUNet(cfg.n_planes, cfg.base_width, cfg.levels,
                                    inject=inject_levels, first_block_norm=False)
        else:
            self.sketch_enc = None
            self.trunk = NestedUNet(1, cfg.base_width, cfg.levels,
                                    first_block_norm=False)
        self.depth_heads = nn.ModuleList()
        widths = self.trunk.widths
        for s in range(self.scales):
            # scale 0 is the coarsest used resolution
            level = self.scales - 1 - s
            head = nn.Conv2d(widths[level], 1, 1)
            # heads output in units of depth_scale around depth_init, so early
            # predictions sit near the scene's depth range
            nn.init.normal_(head.weight, std=0.01)
            nn.init.zeros_(head.bias)
            self.depth_heads.append(head)
        self.mask_head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, sketch, volume=None):
        if self.variant == "ov":
            if volume is None:
                raise ValueError("occupancy volume required for the ov variant")
            if volume.shape[1] != self.cfg.n_planes:
                raise ValueError(
                    f"expected {self.cfg.n_planes} occupancy planes, got {volume.shape[1]}")
            if volume.shape[-2:] != sketch.shape[-2:]:
                raise ValueError("volume and sketch resolutions differ")
            feats = self.trunk(volume, inject_feats={
                i: f for i, f in enumerate(self.sketch_enc(sketch))
                if i in self.trunk.inject})
        else:
            feats = self.trunk(sketch)
        # diagonal features arrive coarse -> fine; use the finest `scales` of them
        used = feats[-self.scales:] if self.scales <= len(feats) else feats
        depths = [self.depth_init + self.depth_scale * head(f)
                  for head, f in zip(self.depth_heads, used)]
        mask_logits = self.mask_head(feats[-1])
        return depths, mask_logits


class DepthAutoencoder(nn.Module):
    """KL-regularized depth autoencoder; also encodes the partial-depth
    condition (depth + validity channel, both normalized)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w = cfg.ae_width
        self.downs = int(math.log2(cfg.latent_downsample))
        chans = [w * (2 ** min(i, 2)) for i in range(self.downs + 1)]
        enc = [ConvBlock(2, chans[0])]
        for i in range(self.downs):
            enc += [nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1),
                    _gn(chans[i + 1]), nn.ReLU(inplace=True),
                    ConvBlock(chans[i + 1], chans[i + 1])]
        self.encoder = nn.Sequential(*enc)
        self.to_stats = nn.Conv2d(chans[-1], 2 * cfg.latent_channels, 1)
        dec = [nn.Conv2d(cfg.latent_channels, chans[-1], 1), _gn(chans[-1]),
               nn.ReLU(inplace=True)]
        for i in range(self.downs, 0, -1):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    ConvBlock(chans[i], chans[i - 1])]
        dec += [nn.Conv2d(chans[0], 1, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def encode_stats(self, x):
        if x.shape[1] != 2:
            raise ValueError("autoencoder expects (depth, validity) channels")
        stats = self.to_stats(self.encoder(x))
        mu, logvar = stats.chunk(2, dim=1)
        return mu, logvar.clamp(-20.0, 10.0)

    def encode(self, x, sample: bool = False,
               generator: torch.Generator | None = None):
        mu, logvar = self.encode_stats(x)
        if not sample:
            return mu
        std = (0.5 * logvar).exp()
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu + std * noise

    def decode(self, z):
        return self.decoder(z)

    @staticmethod
    def kl(mu, logvar):
        return (-0.5 * (1.0 + logvar - mu.pow(2) - logvar.exp())).mean()


class SketchCondEncoder(nn.Module):
    """Top-down sketch raster -> conditioning features at the latent grid size."""

    def __init__(self, cfg: NetConfig, in_res: int, latent_res: int):
        super().__init__()
        if in_res % latent_res:
            raise ValueError("sketch resolution must be a multiple of the latent size")
        downs = int(math.log2(in_res // latent_res))
        w = cfg.cond_width
        chans = [max(w // 4, 8)] + [min(w, max(w // 4, 8) * (2 ** (i + 1)))
                                    for i in range(downs)]
        layers = [ConvBlock(1, chans[0])]
        for i in range(downs):
            layers += [nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1),
                       _gn(chans[i + 1]), nn.ReLU(inplace=True)]
        layers += [nn.Conv2d(chans[-1], w, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, sketch):
        return self.net(sketch)


class CondHead(nn.Module):
    """Two conv blocks aligning a latent to the denoiser input width."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1), _gn(c_out), nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1), _gn(c_out), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


def timestep_embedding(k: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = k.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlockT(nn.Module):
    """Conv residual block with an additive timestep feature."""

    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.conv1 = nn.Sequential(nn.Conv2d(c_in, c_out, 3, padding=1), _gn(c_out))
        self.temb = nn.Linear(t_dim, c_out)
        self.conv2 = nn.Sequential(nn.Conv2d(c_out, c_out, 3, padding=1), _gn(c_out))
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, t):
        h = F.relu(self.conv1(x))
        h = h + self.temb(t)[:, :, None, None]
        h = F.relu(self.conv2(h))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Noise predictor over depth latents with sketch and partial-depth
    conditions. The three inputs are aligned to a common width (the latents
    through two-conv heads) and combined by element-wise summation."""

    def __init__(self, cfg: NetConfig, timesteps: int):
        super().__init__()
        self.timesteps = timesteps
        c = cfg.denoiser_width
        t_dim = cfg.time_embed_dim
        self.head_z = CondHead(cfg.latent_channels, cfg.cond_width)
        self.head_d = CondHead(cfg.latent_channels, cfg.cond_width)
        self.t_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(),
                                   nn.Linear(t_dim, t_dim))
        self.inp = nn.Conv2d(cfg.cond_width, c, 3, padding=1)
        self.down1 = ResBlockT(c, c, t_dim)
        self.down2 = ResBlockT(c, 2 * c, t_dim)
        self.mid = ResBlockT(2 * c, 2 * c, t_dim)
        self.up1 = ResBlockT(2 * c + 2 * c, c, t_dim)
        self.up2 = ResBlockT(c + c, c, t_dim)
        self.out = nn.Conv2d(c, cfg.latent_channels, 3, padding=1)
        self.t_dim = t_dim

    def forward(self, z_k, c_sketch, c_depth, k):
        if not (z_k.shape == c_depth.shape):
            raise ValueError("latent and depth-condition shapes must match")
        if c_sketch.shape[-2:] != z_k.shape[-2:]:
            raise ValueError("sketch condition spatial size must match the latent")
        k = torch.as_tensor(k, dtype=torch.long)
        if k.dim() == 0:
            k = k.expand(z_k.shape[0])
        if (k < 1).any() or (k > self.timesteps).any():
            raise ValueError(f"timestep outside [1, {self.timesteps}]")
        t = self.t_mlp(timestep_embedding(k, self.t_dim).to(z_k.dtype))
        h = self.head_z(z_k) + self.head_d(c_depth) + c_sketch
        h0 = self.inp(h)
        d1 = self.down1(h0, t)
        d2 = self.down2(F.avg_pool2d(d1, 2), t)
        m = self.mid(F.avg_pool2d(d2, 2), t)
        u1 = self.up1(torch.cat([F.interpolate(m, scale_factor=2, mode="nearest"), d2], 1), t)
        u2 = self.up2(torch.cat([F.interpolate(u1, scale_factor=2, mode="nearest"), d1], 1), t)
        return self.out(u2)


class HeightfieldRegressor(nn.Module):
    """Deterministic completion baseline: (partial depth, validity, sketch)
    at heightfield resolution -> complete normalized top-down depth."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.trunk = NestedUNet(3, cfg.base_width, cfg.levels)
        self.head = nn.Conv2d(cfg.base_width, 1, 1)

    def forward(self, x):
        if x.shape[1] != 3:
            raise ValueError("expected (depth, validity, sketch) channels")
        return self.head(self.trunk(x)[-1])


# ----------------------------------------------------------------- checkpoints

def config_hash(cfg_dict: dict) -> str:
    return hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, kind: str, modules: dict[str, nn.Module],
                    cfg_dict: dict, step: int, extra: dict | None = None) -> None:
    header = {
        "kind": kind,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "step": step,
        "extra": extra or {},
    }
    state = {name: m.state_dict() for name, m in modules.items()}
    torch.save({"header": header, "state": state}, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    header, state = blob["header"], blob["state"]
    if header["config_hash"] != config_hash(header["config"]):
        raise ValueError(f"checkpoint {path} header hash mismatch")
    return header, state
