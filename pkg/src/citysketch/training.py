"""Stage-wise training loops: mask net, perspective depth net (mono / with
occupancy volume), depth autoencoder pretraining, latent completion diffusion,
and the deterministic heightfield-regression baseline.

All randomness (batch order, augmentation, noise draws) is derived from
(seed, step), so runs are reproducible and resuming from a checkpoint
continues the exact trajectory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import LossWeights, PipelineConfig
from .dataset import CityDataset
from .losses import (
    depth_total_loss, diffusion_loss, normal_loss, ortho_normals, weighted_bce,
)
from .nets import (
    Denoiser, DepthAutoencoder, DepthNet, HeightfieldRegressor, MaskNet,
    SketchCondEncoder, load_checkpoint, save_checkpoint,
)
from .schedule import NoiseSchedule, add_noise, predict_x0


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str                      # mask | depth | autoencoder | diffusion | baseline
    data_root: str
    out_dir: str
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    augment: bool = True
    log_every: int = 25
    checkpoint_every: int = 500
    val_every: int = 0              # 0 disables mid-run validation
    val_limit: int = 32
    variant: str = "ov"             # depth stage: ov | mono
    mode: str = "pt"                # diffusion stage: fs | pt
    use_normal_loss: bool = True
    occupancy_magnitude: float | None = None
    autoencoder_ckpt: str | None = None
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch size must be positive")

    @classmethod
    def for_stage(cls, stage: str, data_root, out_dir, **kw) -> "TrainConfig":
        defaults = {
            "mask": {"batch_size": 16, "lr": 1e-4},
            "depth": {"batch_size": 16, "lr": 1e-4},
            "autoencoder": {"batch_size": 16, "lr": 1e-4},
            "diffusion": {"batch_size": 32, "lr": 3e-4},
            "baseline": {"batch_size": 12, "lr": 1e-4},
        }
        if stage not in defaults:
            raise ValueError(f"unknown stage {stage!r}")
        args = {**defaults[stage], **kw}
        return cls(stage=stage, data_root=str(data_root), out_dir=str(out_dir), **args)

    def to_dict(self):
        return dataclasses.asdict(self)


def _fold_seed(*keys) -> int:
    blob = json.dumps(keys, sort_keys=True).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") % (2 ** 63)


def step_rng(seed: int, step: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(_fold_seed(seed, step, tag))


def step_generator(seed: int, step: int, tag: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(_fold_seed(seed, step, tag))
    return g


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    rng = step_rng(seed, step, "batch")
    return rng.choice(n, size=batch_size, replace=n < batch_size)


# ------------------------------------------------------------- batch builders

def _to(x, dtype=torch.float32):
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


def mask_batch(ds: CityDataset, idxs, aug_rng=None):
    xs, ys = [], []
    for i in idxs:
        s_t, _ = ds.sketch_inputs(i, aug_rng)
        xs.append(s_t)
        ys.append((ds.raw(i)["m_t"] > 0).astype(np.float32))
    return _to(np.stack(xs)[:, None]), _to(np.stack(ys)[:, None])


def depth_batch(ds: CityDataset, idxs, variant: str, magnitude: float, aug_rng=None):
    sk, ov, d, valid, fg = [], [], [], [], []
    for i in idxs:
        _, s_p = ds.sketch_inputs(i, aug_rng)
        raw = ds.raw(i)
        sk.append(s_p)
        if variant == "ov":
            ov.append(ds.occupancy_volume(i, magnitude))
        dp = raw["d_p"]
        valid.append(np.isfinite(dp).astype(np.float32))
        d.append(np.nan_to_num(dp, nan=0.0).astype(np.float32))
        fg.append((raw["m_p"] > 0).astype(np.float32))
    vol = _to(np.stack(ov)) if variant == "ov" else None
    return (_to(np.stack(sk)[:, None]), vol, _to(np.stack(d)[:, None]),
            _to(np.stack(valid)[:, None]), _to(np.stack(fg)[:, None]))


def latent_batch(ds: CityDataset, idxs, cfg: PipelineConfig, aug_rng=None):
    """(normalized gt heightfield, top-down sketch, normalized condition pair)."""
    gts, sks, conds = [], [], []
    for i in idxs:
        s_t, _ = ds.sketch_inputs(i, aug_rng)
        gt = cfg.depth_range.normalize(ds.heightfield_target(i))
        cd, cv = ds.depth_condition(i)
        cd = cfg.depth_range.normalize(cd)
        gts.append(gt)
        sks.append(s_t)
        conds.append(np.stack([cd, cv]))
    return _to(np.stack(gts)[:, None]), _to(np.stack(sks)[:, None]), _to(np.stack(conds))


# ------------------------------------------------------------------ utilities

class JsonlLogger:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "a")

    def log(self, record: dict):
        self._f.write(json.dumps(record, sort_keys=True) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()


def _check_finite(loss: torch.Tensor, step: int, parts: dict):
    if not torch.isfinite(loss):
        detail = {k: float(v) for k, v in parts.items()}
        raise TrainingDiverged(f"non-finite loss at step {step}: {detail}")


def mask_iou(model: MaskNet, ds: CityDataset, limit: int = 32,
             threshold: float = 0.5) -> float:
    model.eval()
    inter = union = 0.0
    with torch.no_grad():
        for i in range(min(limit, len(ds))):
            x, y = mask_batch(ds, [i])
            pred = torch.sigmoid(model(x)) > threshold
            gt = y > 0.5
            inter += (pred & gt).sum().item()
            union += (pred | gt).sum().item()
    model.train()
    return inter / union if union else 1.0


def depth_abs_rel(model: DepthNet, ds: CityDataset, variant: str, magnitude: float,
                  limit: int = 32) -> float:
    from .metrics import depth_metrics
    model.eval()
    vals = []
    with torch.no_grad():
        for i in range(min(limit, len(ds))):
            sk, vol, d, valid, _ = depth_batch(ds, [i], variant, magnitude)
            preds, _ = model(sk, vol)
            pred = preds[-1][0, 0].numpy()
            gt = np.where(valid[0, 0].numpy() > 0, d[0, 0].numpy(), np.nan)
            vals.append(depth_metrics(pred, gt, np.isfinite(gt)).abs_rel)
    model.train()
    return float(np.mean(vals))


def _save_train_state(path, modules: dict, optim, step: int):
    torch.save({
        "step": step,
        "optim": optim.state_dict(),
        "models": {k: m.state_dict() for k, m in modules.items()},
    }, path)


def _try_resume(path, modules: dict, optim) -> int:
    path = Path(path)
    if not path.exists():
        return 0
    blob = torch.load(path, map_location="cpu", weights_only=False)
    for k, m in modules.items():
        m.load_state_dict(blob["models"][k])
    optim.load_state_dict(blob["optim"])
    return blob["step"]


def _loop(cfg: TrainConfig, modules: dict, optim, one_step, validate=None,
          resume: bool = False):
    """Shared driver: stateless batches, JSONL logging, checkpoints, resume."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logger = JsonlLogger(out / "log.jsonl")
    state_path = out / "train_state.pt"
    start = _try_resume(state_path, modules, optim) if resume else 0
    history = []
    t0 = time.time()
    for step in range(start + 1, cfg.steps + 1):
        parts = one_step(step)
        loss = parts["total"]
        _check_finite(loss, step, parts)
        optim.zero_grad(set_to_none=True)
        loss.backward()
        optim.step()
        rec = {k: float(v.detach() if isinstance(v, torch.Tensor) else v)
               for k, v in parts.items()}
        rec.update({"step": step, "lr": cfg.lr})
        history.append(rec)
        if step % cfg.log_every == 0 or step == cfg.steps:
            logger.log(rec)
        if cfg.val_every and validate and step % cfg.val_every == 0:
            logger.log({"step": step, "val": validate()})
        if step % cfg.checkpoint_every == 0 or step == cfg.steps:
            _save_train_state(state_path, modules, optim, step)
    logger.log({"step": cfg.steps, "wall_s": time.time() - t0, "done": True})
    logger.close()
    return history


# --------------------------------------------------------------------- stages

def train_mask(cfg: TrainConfig, pipe: PipelineConfig | None = None,
               resume: bool = False) -> Path:
    ds = CityDataset(cfg.data_root, "train")
    pipe = pipe or ds.cfg
    torch.manual_seed(cfg.seed)
    model = MaskNet(pipe.net)
    optim = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                             weight_decay=cfg.weight_decay)

    def one_step(step):
        idxs = batch_indices(len(ds), cfg.batch_size, cfg.seed, step)
        aug = step_rng(cfg.seed, step, "aug") if cfg.augment else None
        x, y = mask_batch(ds, idxs, aug)
        logits = model(x)
        loss = weighted_bce(logits, y, cfg.loss.ground_class, cfg.loss.building_class)
        return {"total": loss, "bce": loss}

    def validate():
        val = CityDataset(cfg.data_root, "val")
        return {"iou": mask_iou(model, val, cfg.val_limit)}

    _loop(cfg, {"mask": model}, optim, one_step, validate, resume=resume)
    path = Path(cfg.out_dir) / "mask.pt"
    save_checkpoint(path, "mask", {"mask": model}, pipe.to_dict(), cfg.steps,
                    extra={"train": cfg.to_dict()})
    return path


def train_depth(cfg: TrainConfig, pipe: PipelineConfig | None = None,
                resume: bool = False) -> Path:
    ds = CityDataset(cfg.data_root, "train")
    pipe = pipe or ds.cfg
    magnitude = cfg.occupancy_magnitude
    if magnitude is None:
        magnitude = pipe.net.occupancy_magnitude
    torch.manual_seed(cfg.seed)
    depth_init = 0.5 * (pipe.camera.near + pipe.camera.far)
    depth_scale = 0.5 * (pipe.camera.far - pipe.camera.near)
    model = DepthNet(pipe.net, variant=cfg.variant, depth_init=depth_init,
                     depth_scale=depth_scale)
    optim = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                             weight_decay=cfg.weight_decay)
    sample_cam = ds.raw(0)["cam_p"]
    intr = (sample_cam.fx, sample_cam.fy, sample_cam.cx, sample_cam.cy)

    def one_step(step):
        idxs = batch_indices(len(ds), cfg.batch_size, cfg.seed, step)
        aug = step_rng(cfg.seed, step, "aug") if cfg.augment else None
        sk, vol, d, valid, fg = depth_batch(ds, idxs, cfg.variant, magnitude, aug)
        preds, mask_logits = model(sk, vol)
        parts = depth_total_loss(preds, mask_logits, d, valid, fg, intr, cfg.loss)
        return parts

    def validate():
        val = CityDataset(cfg.data_root, "val")
        return {"abs_rel": depth_abs_rel(model, val, cfg.variant, magnitude,
                                         cfg.val_limit)}

    _loop(cfg, {"depth": model}, optim, one_step, validate, resume=resume)
    path = Path(cfg.out_dir) / f"depth_{cfg.variant}.pt"
    save_checkpoint(path, "depth", {"depth": model}, pipe.to_dict(), cfg.steps,
                    extra={"train": cfg.to_dict(), "variant": cfg.variant,
                           "occupancy_magnitude": magnitude,
                           "depth_init": depth_init, "depth_scale": depth_scale})
    return path


def pretrain_autoencoder(cfg: TrainConfig, pipe: PipelineConfig | None = None,
                         resume: bool = False) -> Path:
    ds = CityDataset(cfg.data_root, "train")
    pipe = pipe or ds.cfg
    torch.manual_seed(cfg.seed)
    ae = DepthAutoencoder(pipe.net)
    optim = torch.optim.Adam(ae.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    def one_step(step):
        idxs = batch_indices(len(ds), cfg.batch_size, cfg.seed, step)
        gt, _, _ = latent_batch(ds, idxs, pipe)
        x = torch.cat([gt, torch.ones_like(gt)], dim=1)
        mu, logvar = ae.encode_stats(x)
        g = step_generator(cfg.seed, step, "reparam")
        z = mu + (0.5 * logvar).exp() * torch.randn(mu.shape, generator=g)
        rec = ae.decode(z)
        l1 = (rec - gt).abs().mean()
        kl = DepthAutoencoder.kl(mu, logvar)
        total = l1 + cfg.loss.kl * kl
        return {"total": total, "l1": l1, "kl": kl}

    _loop(cfg, {"ae": ae}, optim, one_step, resume=resume)
    path = Path(cfg.out_dir) / "autoencoder.pt"
    save_checkpoint(path, "autoencoder", {"ae": ae}, pipe.to_dict(), cfg.steps,
                    extra={"train": cfg.to_dict(),
                           "depth_range": dataclasses.asdict(pipe.depth_range)})
    return path


def _latent_stack(pipe: PipelineConfig, timesteps: int):
    n = pipe.raster.heightfield_n
    latent_res = n // pipe.net.latent_downsample
    ae = DepthAutoencoder(pipe.net)
    sketch_enc = SketchCondEncoder(pipe.net, in_res=pipe.raster.resolution,
                                   latent_res=latent_res)
    den = Denoiser(pipe.net, timesteps=timesteps)
    return ae, sketch_enc, den


def train_diffusion(cfg: TrainConfig, pipe: PipelineConfig | None = None,
                    resume: bool = False) -> Path:
    """Noise-prediction training with sketch + partial-depth conditions and
    auxiliary decoded-depth losses; mode "pt" starts the depth autoencoder from
    a pretrained checkpoint, "fs" from scratch. Encoders train jointly."""
    ds = CityDataset(cfg.data_root, "train")
    pipe = pipe or ds.cfg
    if cfg.mode not in ("fs", "pt"):
        raise ValueError(f"unknown mode {cfg.mode!r}")
    torch.manual_seed(cfg.seed)
    sched = NoiseSchedule.from_config(pipe.schedule)
    ae, sketch_enc, den = _latent_stack(pipe, sched.timesteps)
    if cfg.mode == "pt":
        if not cfg.autoencoder_ckpt:
            raise ValueError("pt mode needs autoencoder_ckpt")
        _, state = load_checkpoint(cfg.autoencoder_ckpt)
        ae.load_state_dict(state["ae"])
    params = list(ae.parameters()) + list(sketch_enc.parameters()) + list(den.parameters())
    optim = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    pitch_n = None  # meters per heightfield cell, read once below

    def one_step(step):
        nonlocal pitch_n
        idxs = batch_indices(len(ds), cfg.batch_size, cfg.seed, step)
        aug = step_rng(cfg.seed, step, "aug") if cfg.augment else None
        gt, sk, cond = latent_batch(ds, idxs, pipe, aug)
        if pitch_n is None:
            cam_t = ds.raw(int(idxs[0]))["cam_t"]
            pitch_n = 2 * cam_t.half_extent / pipe.raster.heightfield_n
        b = gt.shape[0]
        g = step_generator(cfg.seed, step, "noise")
        z = ae.encode(torch.cat([gt, torch.ones_like(gt)], 1), sample=True, generator=g)
        c_d = ae.encode(cond, sample=False)
        c_s = sketch_enc(sk)
        k = torch.randint(1, sched.timesteps + 1, (b,), generator=g)
        eps = torch.randn(z.shape, generator=g)
        z_k = add_noise(z, eps, k, sched)
        eps_hat = den(z_k, c_s, c_d, k)
        l_diff = diffusion_loss(eps, eps_hat)
        z0_hat = predict_x0(z_k, eps_hat, k, sched)
        dec = ae.decode(z0_hat)
        l1 = (dec - gt).abs().mean()
        l2 = ((dec - gt) ** 2).mean()
        parts = {"diff": l_diff, "l1": l1, "l2": l2}
        total = l_diff + cfg.loss.diff_l1 * l1 + cfg.loss.diff_l2 * l2
        if cfg.use_normal_loss:
            d_m = pipe.depth_range.denormalize(dec)
            gt_m = pipe.depth_range.denormalize(gt)
            n_p, ok_p = ortho_normals(d_m, pitch_n)
            with torch.no_grad():
                n_g, ok_g = ortho_normals(gt_m, pitch_n)
            l_n = normal_loss(n_p, n_g, ok_p * ok_g)
            parts["normal"] = l_n
            total = total + cfg.loss.diff_normal * l_n
        parts["total"] = total
        return parts

    modules = {"ae": ae, "sketch_enc": sketch_enc, "den": den}
    _loop(cfg, modules, optim, one_step, resume=resume)
    path = Path(cfg.out_dir) / f"diffusion_{cfg.mode}.pt"
    save_checkpoint(path, "diffusion", modules, pipe.to_dict(), cfg.steps,
                    extra={"train": cfg.to_dict(), "mode": cfg.mode,
                           "use_normal_loss": cfg.use_normal_loss,
                           "timesteps": sched.timesteps,
                           "depth_range": dataclasses.asdict(pipe.depth_range)})
    return path


def train_baseline(cfg: TrainConfig, pipe: PipelineConfig | None = None,
                   resume: bool = False) -> Path:
    """Deterministic completion baseline regressing the full heightfield from
    (partial depth, validity, top-down sketch); trained with L1 plus the
    top-down normal loss."""
    ds = CityDataset(cfg.data_root, "train")
    pipe = pipe or ds.cfg
    torch.manual_seed(cfg.seed)
    model = HeightfieldRegressor(pipe.net)
    optim = torch.optim.Adam(model.parameters(), lr=cfg.lr,
                             weight_decay=cfg.weight_decay)
    n = pipe.raster.heightfield_n
    cam_t = ds.raw(0)["cam_t"]
    pitch_n = 2 * cam_t.half_extent / n

    def one_step(step):
        idxs = batch_indices(len(ds), cfg.batch_size, cfg.seed, step)
        aug = step_rng(cfg.seed, step, "aug") if cfg.augment else None
        gt, sk, cond = latent_batch(ds, idxs, pipe, aug)
        sk_n = torch.nn.functional.interpolate(sk, size=(n, n), mode="area")
        pred = model(torch.cat([cond, sk_n], dim=1))
        l1 = (pred - gt).abs().mean()
        parts = {"l1": l1}
        total = l1
        if cfg.use_normal_loss:
            d_m = pipe.depth_range.denormalize(pred)
            gt_m = pipe.depth_range.denormalize(gt)
            n_p, ok_p = ortho_normals(d_m, pitch_n)
            with torch.no_grad():
                n_g, ok_g = ortho_normals(gt_m, pitch_n)
            l_n = normal_loss(n_p, n_g, ok_p * ok_g)
            parts["normal"] = l_n
            total = total + cfg.loss.diff_normal * l_n
        parts["total"] = total
        return parts

    _loop(cfg, {"baseline": model}, optim, one_step, resume=resume)
    path = Path(cfg.out_dir) / "baseline.pt"
    save_checkpoint(path, "baseline", {"baseline": model}, pipe.to_dict(), cfg.steps,
                    extra={"train": cfg.to_dict(),
                           "use_normal_loss": cfg.use_normal_loss,
                           "depth_range": dataclasses.asdict(pipe.depth_range)})
    return path


STAGES = {
    "mask": train_mask,
    "depth": train_depth,
    "autoencoder": pretrain_autoencoder,
    "diffusion": train_diffusion,
    "baseline": train_baseline,
}
