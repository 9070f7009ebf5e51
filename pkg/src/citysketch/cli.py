"""Command line entry points: dataset generation, stage training, evaluation,
the HTTP service, and headless reconstruction."""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from .config import PipelineConfig, default_config, tiny_config


@click.group()
def main():
    """Sketch-based city massing toolkit."""


def _load_pipe(config_path, profile) -> PipelineConfig:
    if config_path:
        return PipelineConfig.from_json(config_path)
    return tiny_config() if profile == "tiny" else default_config()


@main.command("gen-data")
@click.option("--n", default=2000, help="training samples")
@click.option("--val", default=200, help="validation samples")
@click.option("--test", default=100, help="test samples")
@click.option("--seed", default=0)
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--profile", type=click.Choice(["default", "tiny"]), default="default")
def gen_data(n, val, test, seed, out, config_path, profile):
    """Generate a dataset of rendered scenes and sketches."""
    from .dataset import make_dataset
    cfg = _load_pipe(config_path, profile)
    manifest = make_dataset(out, cfg, n, val, test, base_seed=seed)
    click.echo(f"wrote {len(manifest['entries'])} samples to {out} "
               f"(config {manifest['config_hash']})")


@main.command("train")
@click.option("--stage", required=True,
              type=click.Choice(["mask", "depth", "autoencoder", "diffusion", "baseline"]))
@click.option("--config", "train_config", type=click.Path(exists=True), default=None,
              help="JSON file of training options")
@click.option("--data", "data_root", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--variant", type=click.Choice(["ov", "mono"]), default=None)
@click.option("--mode", type=click.Choice(["fs", "pt"]), default=None)
@click.option("--normal-loss", type=click.Choice(["on", "off"]), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--autoencoder-ckpt", type=click.Path(exists=True), default=None)
@click.option("--resume/--no-resume", default=False)
def train(stage, train_config, data_root, out_dir, variant, mode, normal_loss,
          steps, seed, autoencoder_ckpt, resume):
    """Train one stage; flags override the config file."""
    from .training import STAGES, TrainConfig
    opts = {}
    if train_config:
        with open(train_config) as f:
            opts = json.load(f)
    opts.pop("stage", None)
    if data_root:
        opts["data_root"] = data_root
    if out_dir:
        opts["out_dir"] = out_dir
    for key, val in (("variant", variant), ("mode", mode), ("steps", steps),
                     ("seed", seed), ("autoencoder_ckpt", autoencoder_ckpt)):
        if val is not None:
            opts[key] = val
    if normal_loss is not None:
        opts["use_normal_loss"] = normal_loss == "on"
    if "data_root" not in opts or "out_dir" not in opts:
        raise click.UsageError("need --data and --out (or a config file with them)")
    cfg = TrainConfig.for_stage(stage, opts.pop("data_root"), opts.pop("out_dir"), **opts)
    path = STAGES[stage](cfg, resume=resume)
    click.echo(f"checkpoint: {path}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", "data_root", required=True, type=click.Path(exists=True))
@click.option("--split", default="test")
@click.option("--metrics", default="2d", help="comma list: 2d,3d")
@click.option("--visibility", type=click.Choice(["on", "off"]), default="on")
@click.option("--report", "report_dir", type=click.Path(), default=None)
@click.option("--mask-checkpoint", type=click.Path(exists=True), default=None,
              help="first-stage mask net (completion models)")
@click.option("--depth-checkpoint", type=click.Path(exists=True), default=None,
              help="first-stage depth net (completion models)")
@click.option("--limit", type=int, default=None)
def eval_cmd(checkpoint, data_root, split, metrics, visibility, report_dir,
             mask_checkpoint, depth_checkpoint, limit):
    """Evaluate a checkpoint on a dataset split."""
    from .dataset import CityDataset
    from .experiments import (
        FirstStage, eval_completion, eval_depth_checkpoint, load_checkpoint_kind,
    )
    from .metrics import emit_report
    kind = load_checkpoint_kind(checkpoint)
    wants = {m.strip() for m in metrics.split(",") if m.strip()}
    if kind == "depth":
        row = eval_depth_checkpoint(checkpoint, data_root, split, limit=limit)
    elif kind in ("diffusion", "baseline"):
        if not (mask_checkpoint and depth_checkpoint):
            raise click.UsageError(
                "completion checkpoints need --mask-checkpoint and --depth-checkpoint")
        ds = CityDataset(data_root, split)
        first = FirstStage(mask_checkpoint, depth_checkpoint, ds)
        mesh_n = 20_000 if ("3d" in wants and visibility == "on") else 0
        row = eval_completion(kind, checkpoint, first, limit=limit, mesh_samples=mesh_n)
    else:
        raise click.UsageError(f"cannot evaluate checkpoint kind {kind!r}")
    click.echo(json.dumps(row, indent=2, sort_keys=True))
    if report_dir:
        flat = {k: v for k, v in row.items() if not isinstance(v, (dict, list))}
        if isinstance(row.get("mesh3d"), dict):
            flat.update({f"mesh_{k}": v for k, v in row["mesh3d"].items()})
        emit_report([{"model": Path(checkpoint).stem, **flat}], report_dir,
                    name="eval", meta={"split": split, "visibility": visibility})
        click.echo(f"report written to {report_dir}")


@main.command("serve")
@click.option("--checkpoints", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000)
@click.option("--ui", "ui_dir", type=click.Path(), default=None,
              help="static UI build to mount at /ui (e.g. frontend/dist)")
def serve(ckpt_dir, host, port, ui_dir):
    """Run the sketching service."""
    import uvicorn
    from .pipeline import ModelBundle
    from .server import create_app
    bundle = ModelBundle.from_dir(ckpt_dir)
    app = create_app(bundle, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command("reconstruct")
@click.option("--s-t", "s_t_path", required=True, type=click.Path(exists=True),
              help="top-down sketch PNG")
@click.option("--s-p", "s_p_paths", required=True, multiple=True,
              type=click.Path(exists=True), help="perspective sketch PNG (repeatable)")
@click.option("--checkpoints", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0)
@click.option("--steps", type=int, default=None)
def reconstruct_cmd(s_t_path, s_p_paths, ckpt_dir, out_dir, seed, steps):
    """Headless reconstruction from sketch rasters to an OBJ mesh."""
    import time
    from .dataset import load_gray8, save_depth16, save_gray8, save_labels16
    from .geometry import write_obj
    from .pipeline import ModelBundle
    bundle = ModelBundle.from_dir(ckpt_dir)
    s_t = load_gray8(s_t_path)
    s_p = [load_gray8(p) for p in s_p_paths]
    t0 = time.perf_counter()
    result = bundle.reconstruct(s_t, s_p, seed=seed, steps=steps,
                                views=list(range(len(s_p))))
    wall = time.perf_counter() - t0
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_obj(result["mesh"], out / "mesh.obj")
    save_gray8(out / "m_t.png", result["m_t"] * 255)
    save_labels16(out / "m_star_t.png", result["m_star"])
    save_depth16(out / "d_t.png", result["d_t"])
    for i, d in enumerate(result["d_p"]):
        save_depth16(out / f"d_p_{i}.png", np.where(result["m_p"][i] > 0, d, np.nan))
    with open(out / "summary.json", "w") as f:
        json.dump({"n_buildings": result["n_buildings"], "seed": seed,
                   "steps": result["steps"], "wall_s": wall,
                   "timings": result["timings"]}, f, indent=2)
    click.echo(f"{result['n_buildings']} buildings in {wall:.2f}s -> {out / 'mesh.obj'}")


@main.command("write-config")
@click.option("--profile", type=click.Choice(["default", "tiny"]), default="default")
@click.option("--out", required=True, type=click.Path())
def write_config(profile, out):
    """Dump a pipeline config JSON to edit and reuse."""
    cfg = tiny_config() if profile == "tiny" else default_config()
    cfg.to_json(out)
    click.echo(f"wrote {profile} config to {out} (hash {cfg.hash()})")


if __name__ == "__main__":
    main()
