"""Experiment harness: evaluation of trained checkpoints on dataset splits,
ablation matrices (occupancy variants, magnitude sweep, pretraining and
normal-loss toggles, deterministic baseline, multi-view fusion), and the
cached acceptance run used by the test suite.

Heavy artifacts are keyed by path & reused: delete the work directory (or pass
force=True) to retrain.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import torch

from . import rendering
from .config import PipelineConfig, tiny_config
from .dataset import CityDataset, hash_file_tree, make_dataset
from .geometry import (
    Heightfield, backproject_depth, clamp_heightfield, fuse_heightfields,
    heightfield_to_mesh, normals_from_depth, project_to_heightfield,
)
from .metrics import depth_metrics, emit_report, mesh_metrics
from .nets import (
    Denoiser, DepthAutoencoder, DepthNet, HeightfieldRegressor, MaskNet,
    SketchCondEncoder, load_checkpoint,
)
from .pipeline import resample_mask
from .scene import extra_view
from .schedule import NoiseSchedule, ddim_sample
from .training import TrainConfig, STAGES, train_depth


# ------------------------------------------------------------------- loaders

def load_checkpoint_kind(ckpt) -> str:
    header, _ = load_checkpoint(ckpt)
    return header["kind"]


def load_mask_model(ckpt):
    header, state = load_checkpoint(ckpt)
    cfg = PipelineConfig.from_dict(header["config"])
    net = MaskNet(cfg.net)
    net.load_state_dict(state["mask"])
    return net.eval(), header


def load_depth_model(ckpt):
    header, state = load_checkpoint(ckpt)
    cfg = PipelineConfig.from_dict(header["config"])
    net = DepthNet(cfg.net, variant=header["extra"]["variant"],
                   depth_init=header["extra"]["depth_init"],
                   depth_scale=header["extra"]["depth_scale"])
    net.load_state_dict(state["depth"])
    return net.eval(), header


def load_diffusion_stack(ckpt):
    header, state = load_checkpoint(ckpt)
    cfg = PipelineConfig.from_dict(header["config"])
    n = cfg.raster.heightfield_n
    ae = DepthAutoencoder(cfg.net)
    se = SketchCondEncoder(cfg.net, cfg.raster.resolution, n // cfg.net.latent_downsample)
    den = Denoiser(cfg.net, timesteps=header["extra"]["timesteps"])
    ae.load_state_dict(state["ae"])
    se.load_state_dict(state["sketch_enc"])
    den.load_state_dict(state["den"])
    sched = NoiseSchedule(header["extra"]["timesteps"], cfg.schedule.beta_start,
                          cfg.schedule.beta_end)
    return (ae.eval(), se.eval(), den.eval(), sched), header


def load_baseline_model(ckpt):
    header, state = load_checkpoint(ckpt)
    cfg = PipelineConfig.from_dict(header["config"])
    net = HeightfieldRegressor(cfg.net)
    net.load_state_dict(state["baseline"])
    return net.eval(), header


# ---------------------------------------------------------- depth-net metrics

def eval_depth_checkpoint(ckpt, data_root, split: str = "test",
                          limit: int | None = None) -> dict:
    """Perspective depth metrics with ground-truth-mask occupancy volumes
    (isolates the depth network from mask errors). Per-sample metrics averaged."""
    net, header = load_depth_model(ckpt)
    ds = CityDataset(data_root, split)
    variant = header["extra"]["variant"]
    magnitude = header["extra"]["occupancy_magnitude"]
    n = len(ds) if limit is None else min(limit, len(ds))
    sums: dict[str, float] = {}
    with torch.no_grad():
        for i in range(n):
            raw = ds.raw(i)
            s_t, s_p = ds.sketch_inputs(i)
            x = torch.from_numpy(s_p)[None, None]
            vol = None
            if variant == "ov":
                vol = torch.from_numpy(ds.occupancy_volume(i, magnitude))[None]
            preds, _ = net(x, vol)
            pred = preds[-1][0, 0].numpy()
            gt = raw["d_p"]
            m = depth_metrics(pred, np.nan_to_num(gt, nan=1.0), np.isfinite(gt))
            for k, v in m.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
    return {k: v / n for k, v in sums.items()} | {"n_samples": n, "variant": variant,
                                                  "magnitude": magnitude}


def eval_mask_checkpoint(ckpt, data_root, split: str = "val",
                         limit: int | None = None) -> float:
    from .training import mask_iou
    net, _ = load_mask_model(ckpt)
    ds = CityDataset(data_root, split)
    return mask_iou(net, ds, limit=limit or len(ds))


# ------------------------------------------------------- completion pipeline

class FirstStage:
    """Predicted mask -> occupancy volume -> predicted perspective depth ->
    clamped partial heightfield, cached per (sample, views)."""

    def __init__(self, mask_ckpt, depth_ckpt, ds: CityDataset):
        self.mask_net, _ = load_mask_model(mask_ckpt)
        self.depth_net, hdr = load_depth_model(depth_ckpt)
        self.variant = hdr["extra"]["variant"]
        self.magnitude = hdr["extra"]["occupancy_magnitude"]
        self.ds = ds
        self.cfg = ds.cfg
        self._cache: dict = {}

    def _predict_view(self, idx: int, view: int, m_t: np.ndarray):
        from .geometry import build_occupancy_volume
        raw = self.ds.raw(idx)
        if view == 0:
            cam_p = raw["cam_p"]
            s_p = (1.0 - raw["s_p"] / 255.0).astype(np.float32)
        else:
            scene = raw["scene"]
            cam_p = extra_view(scene, self.cfg.camera, self.cfg.raster.resolution)
            d = rendering.render_depth(scene, cam_p)
            nrm = normals_from_depth(d, cam_p)
            sketch = rendering.render_sketch(d, nrm, self.cfg.sketch)
            s_p = (1.0 - sketch / 255.0).astype(np.float32)
        x = torch.from_numpy(s_p)[None, None]
        vol = None
        if self.variant == "ov":
            ov = build_occupancy_volume(m_t > 0, raw["cam_t"], cam_p,
                                        self.cfg.net.n_planes, self.magnitude)
            vol = torch.from_numpy(ov)[None]
        with torch.no_grad():
            preds, fg_logits = self.depth_net(x, vol)
        d_p = preds[-1][0, 0].numpy().astype(np.float64)
        m_p = torch.sigmoid(fg_logits)[0, 0].numpy() > 0.5
        return backproject_depth(d_p, m_p, cam_p)

    def condition(self, idx: int, views: tuple = (0,)):
        key = (idx, tuple(views))
        if key in self._cache:
            return self._cache[key]
        raw = self.ds.raw(idx)
        s_t = (1.0 - raw["s_t"] / 255.0).astype(np.float32)
        with torch.no_grad():
            logits = self.mask_net(torch.from_numpy(s_t)[None, None])
        m_t = (torch.sigmoid(logits)[0, 0].numpy() > 0.5).astype(np.uint8)
        n = self.cfg.raster.heightfield_n
        fields = [project_to_heightfield(self._predict_view(idx, v, m_t),
                                         raw["cam_t"], n) for v in views]
        hf = fuse_heightfields(fields)
        hf = clamp_heightfield(hf, resample_mask(m_t, n), float(raw["cam_t"].height))
        depth = np.where(hf.valid, hf.values, raw["cam_t"].height)
        out = (depth.astype(np.float32), hf.valid.astype(np.float32), m_t)
        self._cache[key] = out
        return out


def _complete_diffusion(stack, cfg: PipelineConfig, s_t, cond_depth, cond_valid,
                        seed: int, steps: int):
    ae, se, den, sched = stack
    dr = cfg.depth_range
    x_t = torch.from_numpy(s_t)[None, None]
    cond = torch.from_numpy(np.stack([dr.normalize(cond_depth), cond_valid])
                            .astype(np.float32))[None]
    with torch.no_grad():
        c_s = se(x_t)
        c_d = ae.encode(cond, sample=False)

        def eps_fn(z, k):
            return den(z, c_s, c_d, torch.full((z.shape[0],), k, dtype=torch.long))

        latent = cfg.raster.heightfield_n // cfg.net.latent_downsample
        z0 = ddim_sample(eps_fn, (1, cfg.net.latent_channels, latent, latent),
                         sched, steps, generator=torch.Generator().manual_seed(seed))
        dec = ae.decode(z0)
    return dr.denormalize(dec[0, 0].numpy().astype(np.float64))


def _complete_baseline(net, cfg: PipelineConfig, s_t, cond_depth, cond_valid):
    dr = cfg.depth_range
    n = cfg.raster.heightfield_n
    sk = torch.from_numpy(s_t)[None, None]
    sk_n = torch.nn.functional.interpolate(sk, size=(n, n), mode="area")
    x = torch.cat([torch.from_numpy(np.stack([dr.normalize(cond_depth), cond_valid])
                                    .astype(np.float32))[None], sk_n], dim=1)
    with torch.no_grad():
        out = net(x)
    return dr.denormalize(out[0, 0].numpy().astype(np.float64))


def rooftop_flatness(pred_depth: np.ndarray, instances: np.ndarray) -> list[float]:
    """Variance of predicted depth over each instance's cells."""
    out = []
    for lab in range(1, int(instances.max()) + 1):
        sel = instances == lab
        if sel.sum() >= 4:
            out.append(float(pred_depth[sel].var()))
    return out


def eval_completion(kind: str, ckpt, first: FirstStage, limit: int | None = None,
                    views: tuple = (0,), sample_seed: int = 777,
                    steps: int | None = None, mesh_samples: int = 0,
                    mesh_limit: int = 25) -> dict:
    """Building-masked top-down depth metrics for a completion model running on
    first-stage predictions; optionally rooftop-flatness stats and
    visibility-masked 3D mesh metrics."""
    ds = first.ds
    cfg = ds.cfg
    if kind == "diffusion":
        stack, hdr = load_diffusion_stack(ckpt)
        steps = steps or cfg.schedule.sample_steps
    elif kind == "baseline":
        net, hdr = load_baseline_model(ckpt)
    else:
        raise ValueError(f"unknown completion kind {kind!r}")
    n = len(ds) if limit is None else min(limit, len(ds))
    sums: dict[str, float] = {}
    flatness: list[float] = []
    mesh_sums: dict[str, float] = {}
    mesh_count = 0
    for i in range(n):
        raw = ds.raw(i)
        s_t = (1.0 - raw["s_t"] / 255.0).astype(np.float32)
        cond_depth, cond_valid, _ = first.condition(i, views)
        if kind == "diffusion":
            pred = _complete_diffusion(stack, cfg, s_t, cond_depth, cond_valid,
                                       seed=sample_seed + i, steps=steps)
        else:
            pred = _complete_baseline(net, cfg, s_t, cond_depth, cond_valid)
        gt = ds.heightfield_target(i).astype(np.float64)
        gt_mask = ds.heightfield_mask(i) > 0
        m = depth_metrics(pred, gt, gt_mask)
        for k, v in m.as_dict().items():
            sums[k] = sums.get(k, 0.0) + v
        flatness.extend(rooftop_flatness(pred, ds.instance_grid(i)))
        if mesh_samples and mesh_count < mesh_limit:
            cam_t = raw["cam_t"]
            hn = cfg.raster.heightfield_n
            pitch = 2 * cam_t.half_extent / hn
            mk = dict(x0=cam_t.x0, y1=cam_t.y1, pitch=pitch,
                      ortho_height=float(cam_t.height))
            hf_p = Heightfield(values=pred, valid=np.ones_like(pred, bool), **mk)
            hf_g = Heightfield(values=gt, valid=np.ones_like(gt, bool), **mk)
            mm = mesh_metrics(
                heightfield_to_mesh(hf_p, float(pred.max())),
                heightfield_to_mesh(hf_g, float(gt.max())),
                visibility="on", n_samples=mesh_samples,
                tau=1.0, vis_context=(raw["d_p"], raw["cam_p"], pitch * np.sqrt(2)),
                seed=i,
            )
            for k, v in mm.as_dict().items():
                mesh_sums[k] = mesh_sums.get(k, 0.0) + v
            mesh_count += 1
    out = {k: v / n for k, v in sums.items()}
    out["n_samples"] = n
    out["views"] = list(views)
    out["flatness_median"] = float(np.median(flatness)) if flatness else float("nan")
    if mesh_count:
        out["mesh3d"] = {k: v / mesh_count for k, v in mesh_sums.items()}
        out["mesh3d"]["n_scenes"] = mesh_count
    return out


# --------------------------------------------------------- sweeps and matrix

def run_magnitude_sweep(data_root, out_root, values, seed: int = 0,
                        steps: int = 400, batch_size: int = 8,
                        lr: float = 1e-3) -> dict:
    """Train one occupancy-volume depth model per magnitude value."""
    out_root = Path(out_root)
    paths = {}
    for v in values:
        out = out_root / f"ov_mag{v:g}_s{seed}"
        ckpt = out / "depth_ov.pt"
        if not ckpt.exists():
            cfg = TrainConfig.for_stage("depth", data_root, out, steps=steps,
                                        batch_size=batch_size, lr=lr, seed=seed,
                                        variant="ov", occupancy_magnitude=float(v))
            train_depth(cfg)
        paths[float(v)] = str(ckpt)
    return paths


ACCEPT_STEPS = {
    "mask": 300, "depth": 400, "autoencoder": 700, "diffusion": 800, "baseline": 600,
}
ACCEPT_LR = {
    "mask": 1e-3, "depth": 1e-3, "autoencoder": 1e-3, "diffusion": 1e-3, "baseline": 1e-3,
}
ACCEPT_BATCH = {
    "mask": 8, "depth": 8, "autoencoder": 16, "diffusion": 16, "baseline": 8,
}


def _train_if_missing(stage: str, data_root, out_dir, ckpt_name: str, **kw) -> Path:
    out_dir = Path(out_dir)
    ckpt = out_dir / ckpt_name
    if ckpt.exists():
        return ckpt
    cfg = TrainConfig.for_stage(
        stage, data_root, out_dir,
        steps=kw.pop("steps", ACCEPT_STEPS[stage]),
        batch_size=kw.pop("batch_size", ACCEPT_BATCH[stage]),
        lr=kw.pop("lr", ACCEPT_LR[stage]),
        **kw,
    )
    t0 = time.time()
    path = STAGES[stage](cfg, resume=True)
    print(f"[train] {out_dir.name}: {time.time() - t0:.0f}s")
    return Path(path)


def ensure_acceptance_dataset(work: Path, counts=(2000, 200, 100)) -> Path:
    cfg = tiny_config()
    root = work / "data"
    if not (root / "manifest.json").exists():
        t0 = time.time()
        make_dataset(root, cfg, *counts, base_seed=0)
        print(f"[data] generated {sum(counts)} samples in {time.time() - t0:.0f}s")
    return root


def run_acceptance(work="runs/acceptance", seeds=(0, 1, 2),
                   counts=(2000, 200, 100), force: bool = False,
                   eval_limit: int = 100, steps: dict | None = None) -> dict:
    """Train the ablation matrix (cached) and evaluate every direction claim.
    Returns the results dict; also writes eval/results.json and reports/."""
    work = Path(work)
    results_path = work / "eval" / "results.json"
    if results_path.exists() and not force:
        with open(results_path) as f:
            return json.load(f)

    steps = {**ACCEPT_STEPS, **(steps or {})}
    torch.set_num_threads(max(torch.get_num_threads(), 2))
    data_root = ensure_acceptance_dataset(work, counts)
    ck = work / "ckpt"

    mask_ckpt = _train_if_missing("mask", data_root, ck / "mask_s0", "mask.pt",
                                  seed=0, steps=steps["mask"])

    depth_ckpts: dict = {}
    for seed in seeds:
        depth_ckpts[("ov", seed)] = _train_if_missing(
            "depth", data_root, ck / f"depth_ov_s{seed}", "depth_ov.pt",
            seed=seed, variant="ov", steps=steps["depth"])
        depth_ckpts[("mono", seed)] = _train_if_missing(
            "depth", data_root, ck / f"depth_mono_s{seed}", "depth_mono.pt",
            seed=seed, variant="mono", steps=steps["depth"])
        depth_ckpts[("ov_m1", seed)] = _train_if_missing(
            "depth", data_root, ck / f"depth_ov_m1_s{seed}", "depth_ov.pt",
            seed=seed, variant="ov", occupancy_magnitude=1.0, steps=steps["depth"])

    ae_ckpt = _train_if_missing("autoencoder", data_root, ck / "autoencoder",
                                "autoencoder.pt", seed=0, steps=steps["autoencoder"])

    diff_ckpts: dict = {}
    for seed in seeds:
        diff_ckpts[("pt_norm", seed)] = _train_if_missing(
            "diffusion", data_root, ck / f"diffusion_pt_s{seed}", "diffusion_pt.pt",
            seed=seed, mode="pt", use_normal_loss=True, autoencoder_ckpt=str(ae_ckpt),
            steps=steps["diffusion"])
    diff_ckpts[("pt_nonorm", 0)] = _train_if_missing(
        "diffusion", data_root, ck / "diffusion_pt_nonorm_s0", "diffusion_pt.pt",
        seed=0, mode="pt", use_normal_loss=False, autoencoder_ckpt=str(ae_ckpt),
        steps=steps["diffusion"])
    diff_ckpts[("fs_norm", 0)] = _train_if_missing(
        "diffusion", data_root, ck / "diffusion_fs_s0", "diffusion_fs.pt",
        seed=0, mode="fs", use_normal_loss=True, steps=steps["diffusion"])

    base_ckpts = {
        seed: _train_if_missing("baseline", data_root, ck / f"baseline_s{seed}",
                                "baseline.pt", seed=seed, use_normal_loss=True,
                                steps=steps["baseline"])
        for seed in seeds
    }

    # ----------------------------------------------------------- evaluation
    print("[eval] perspective depth models")
    results: dict = {
        "dataset_hash": hash_file_tree(data_root),
        "config_hash": tiny_config().hash(),
        "seeds": list(seeds),
        "mask_val_iou": eval_mask_checkpoint(mask_ckpt, data_root, "val", limit=64),
        "depth": {}, "completion": {}, "multiview": {},
        "checkpoints": {"mask": str(mask_ckpt), "autoencoder": str(ae_ckpt)},
    }
    for (tag, seed), ckpt in depth_ckpts.items():
        results["depth"][f"{tag}_s{seed}"] = eval_depth_checkpoint(
            ckpt, data_root, "test", limit=eval_limit)
        results["checkpoints"][f"depth_{tag}_s{seed}"] = str(ckpt)

    print("[eval] completion models")
    test_ds = CityDataset(data_root, "test")
    first = FirstStage(mask_ckpt, depth_ckpts[("ov", 0)], test_ds)
    first_by_seed = {0: first}
    for seed in seeds:
        if seed not in first_by_seed:
            first_by_seed[seed] = FirstStage(mask_ckpt, depth_ckpts[("ov", seed)], test_ds)
    for (tag, seed), ckpt in diff_ckpts.items():
        mesh_n = 20_000 if (tag in ("pt_norm", "pt_nonorm") and seed == 0) else 0
        results["completion"][f"diffusion_{tag}_s{seed}"] = eval_completion(
            "diffusion", ckpt, first_by_seed.get(seed, first), limit=eval_limit,
            mesh_samples=mesh_n)
        results["checkpoints"][f"diffusion_{tag}_s{seed}"] = str(ckpt)
    for seed, ckpt in base_ckpts.items():
        results["completion"][f"baseline_s{seed}"] = eval_completion(
            "baseline", ckpt, first_by_seed.get(seed, first), limit=eval_limit)
        results["checkpoints"][f"baseline_s{seed}"] = str(ckpt)

    print("[eval] multi-view fusion")
    results["multiview"]["single"] = eval_completion(
        "diffusion", diff_ckpts[("pt_norm", 0)], first, limit=min(eval_limit, 50),
        views=(0,))
    results["multiview"]["two_view"] = eval_completion(
        "diffusion", diff_ckpts[("pt_norm", 0)], first, limit=min(eval_limit, 50),
        views=(0, 1))

    # ------------------------------------------------------------- reports
    rep = work / "reports"
    emit_report(
        [{"model": k, **{m: v for m, v in r.items() if not isinstance(v, (list, dict))}}
         for k, r in results["depth"].items()],
        rep, name="depth_ablation",
        meta={"dataset": results["dataset_hash"], "split": "test"})
    emit_report(
        [{"model": k, **{m: v for m, v in r.items() if not isinstance(v, (list, dict))}}
         for k, r in results["completion"].items()],
        rep, name="completion",
        meta={"dataset": results["dataset_hash"], "split": "test",
              "note": "pretrained mode = depth-autoencoder pretraining (no external weights)"})
    emit_report(
        [{"model": k, **{m: v for m, v in r.items() if not isinstance(v, (list, dict))}}
         for k, r in results["multiview"].items()],
        rep, name="multiview", meta={"dataset": results["dataset_hash"]})

    results_path.parent.mkdir(parents=True, exist_ok=True)
    with open(results_path, "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
    return results
