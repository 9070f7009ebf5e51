"""On-disk training samples and the in-memory dataset used by the training loops.

Sample layout (one directory per id):
    s_t.png, s_p.png        8-bit grayscale sketches (white bg, dark strokes)
    m_t.png, m_p.png        8-bit binary masks (0 / 255)
    m_star_t.png            16-bit instance labels
    d_t.png, d_p.png        16-bit quantized depth + .json sidecar (min/scale/invalid)
    cams.json, scene.json
`manifest.json` at the dataset root lists ids, splits, seeds and the config hash.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from . import rendering
from .cameras import load_cameras, save_cameras
from .config import PipelineConfig
from .geometry import backproject_depth, clamp_heightfield, connected_components, \
    project_to_heightfield
from .scene import Scene, augment_heights, generate_scene, place_cameras

INVALID_U16 = 65535
SPLIT_SEED_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


# ------------------------------------------------------------------ file i/o

def save_gray8(path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(path)


def load_gray8(path) -> np.ndarray:
    return np.array(Image.open(path).convert("L"), dtype=np.uint8)


def save_labels16(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels, dtype=np.uint16)
    Image.fromarray(arr).save(path)


def load_labels16(path) -> np.ndarray:
    return np.array(Image.open(path), dtype=np.uint16)


def encode_depth16(depth: np.ndarray) -> tuple[bytes, dict]:
    """Quantize to 16-bit PNG bytes plus sidecar; NaN becomes the invalid code."""
    import io
    depth = np.asarray(depth, dtype=np.float64)
    finite = np.isfinite(depth)
    if finite.any():
        d_min = float(depth[finite].min())
        d_max = float(depth[finite].max())
    else:
        d_min, d_max = 0.0, 0.0
    scale = (d_max - d_min) / (INVALID_U16 - 1) if d_max > d_min else 1.0
    q = np.zeros(depth.shape, dtype=np.uint16)
    q[finite] = np.round((depth[finite] - d_min) / scale).astype(np.uint16)
    q[~finite] = INVALID_U16
    buf = io.BytesIO()
    Image.fromarray(q).save(buf, format="PNG")
    return buf.getvalue(), {"min": d_min, "scale": scale, "invalid": INVALID_U16}


def save_depth16(path, depth: np.ndarray) -> None:
    png, sidecar = encode_depth16(depth)
    with open(path, "wb") as f:
        f.write(png)
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f)


def load_depth16(path) -> np.ndarray:
    q = np.array(Image.open(path), dtype=np.uint16)
    with open(str(path) + ".json") as f:
        side = json.load(f)
    d = q.astype(np.float64) * side["scale"] + side["min"]
    d[q == side["invalid"]] = np.nan
    return d


# ------------------------------------------------------------------ samples

SAMPLE_FILES = ("s_t.png", "s_p.png", "m_t.png", "m_p.png", "m_star_t.png",
                "d_t.png", "d_p.png", "cams.json", "scene.json")


def write_sample(out_dir: Path, scene: Scene, cfg: PipelineConfig,
                 yaw_deg: float | None = None) -> None:
    res = cfg.raster.resolution
    cam_p, cam_t = place_cameras(scene, cfg.camera, res, yaw_deg=yaw_deg)
    s_t, s_p, d_t, d_p = rendering.sketch_pair(scene, cam_p, cam_t, cfg.sketch)
    m_t = (d_t < cam_t.height).astype(np.uint8) * 255
    m_p = np.isfinite(d_p).astype(np.uint8) * 255
    m_star = connected_components(m_t)

    out_dir.mkdir(parents=True, exist_ok=True)
    save_gray8(out_dir / "s_t.png", s_t)
    save_gray8(out_dir / "s_p.png", s_p)
    save_gray8(out_dir / "m_t.png", m_t)
    save_gray8(out_dir / "m_p.png", m_p)
    save_labels16(out_dir / "m_star_t.png", m_star)
    save_depth16(out_dir / "d_t.png", d_t)
    save_depth16(out_dir / "d_p.png", d_p)
    save_cameras(out_dir / "cams.json", cam_p, cam_t)
    scene.save(out_dir / "scene.json")


def load_sample(sample_dir) -> dict:
    d = Path(sample_dir)
    for name in SAMPLE_FILES:
        if not (d / name).exists():
            raise FileNotFoundError(f"missing {name} in {d}")
    cam_p, cam_t, _ = load_cameras(d / "cams.json")
    return {
        "s_t": load_gray8(d / "s_t.png"),
        "s_p": load_gray8(d / "s_p.png"),
        "m_t": load_gray8(d / "m_t.png"),
        "m_p": load_gray8(d / "m_p.png"),
        "m_star_t": load_labels16(d / "m_star_t.png"),
        "d_t": load_depth16(d / "d_t.png"),
        "d_p": load_depth16(d / "d_p.png"),
        "cam_p": cam_p,
        "cam_t": cam_t,
        "scene": Scene.load(d / "scene.json"),
    }


# ------------------------------------------------------------------ dataset

def make_dataset(out_dir, cfg: PipelineConfig, n_train: int, n_val: int,
                 n_test: int, base_seed: int = 0) -> dict:
    """Generate a dataset on disk and return the manifest. Train/val/test use
    disjoint seed ranges; training scenes get height augmentation and a random
    camera yaw, eval splits use the canonical rig."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    counts = {"train": n_train, "val": n_val, "test": n_test}
    for split, count in counts.items():
        for i in range(count):
            seed = base_seed + SPLIT_SEED_OFFSETS[split] + i
            scene = generate_scene(seed, cfg.scene)
            yaw = None
            if split == "train":
                rng = np.random.default_rng(seed ^ 0x5DEECE66D)
                scene = augment_heights(scene, rng, cfg.scene)
                yaw = float(rng.uniform(0.0, 360.0))
            sample_id = f"{split}_{i:05d}"
            try:
                write_sample(out_dir / sample_id, scene, cfg, yaw_deg=yaw)
            except OSError as e:
                raise OSError(f"failed to write sample {out_dir / sample_id}: {e}") from e
            entries.append({"id": sample_id, "split": split, "seed": seed})
    manifest = {
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "counts": counts,
        "base_seed": base_seed,
        "seed_offsets": SPLIT_SEED_OFFSETS,
        "entries": entries,
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def load_manifest(root) -> dict:
    with open(Path(root) / "manifest.json") as f:
        return json.load(f)


class CityDataset:
    """Decoded samples for one split, cached in memory, with derived training
    tensors (occupancy volume, heightfield targets, partial-depth condition).

    Batching and augmentation randomness are owned by the training loop, which
    passes explicit generators; the dataset itself is stateless.
    """

    def __init__(self, root, split: str, cfg: PipelineConfig | None = None):
        self.root = Path(root)
        manifest = load_manifest(self.root)
        self.cfg = cfg or PipelineConfig.from_dict(manifest["config"])
        self.ids = [e["id"] for e in manifest["entries"] if e["split"] == split]
        if not self.ids:
            raise ValueError(f"no samples for split '{split}' in {root}")
        self.split = split
        self._cache: dict = {}

    def __len__(self):
        return len(self.ids)

    def raw(self, idx: int) -> dict:
        if idx not in self._cache:
            self._cache[idx] = load_sample(self.root / self.ids[idx])
        return self._cache[idx]

    def sketch_inputs(self, idx: int, aug_rng: np.random.Generator | None = None):
        """Top-down and perspective sketches as float arrays, strokes = 1."""
        raw = self.raw(idx)
        s_t, s_p = raw["s_t"], raw["s_p"]
        if aug_rng is not None:
            s_t = rendering.augment_sketch(s_t, aug_rng, self.cfg.sketch)
            s_p = rendering.augment_sketch(s_p, aug_rng, self.cfg.sketch)
        return (1.0 - s_t / 255.0).astype(np.float32), (1.0 - s_p / 255.0).astype(np.float32)

    def occupancy_volume(self, idx: int, magnitude: float | None = None) -> np.ndarray:
        # rebuilt per fetch: ~3 ms, and caching volumes for thousands of
        # samples would dominate memory
        from .geometry import build_occupancy_volume
        raw = self.raw(idx)
        mag = self.cfg.net.occupancy_magnitude if magnitude is None else magnitude
        return build_occupancy_volume(
            raw["m_t"] > 0, raw["cam_t"], raw["cam_p"], self.cfg.net.n_planes, mag)

    def heightfield_target(self, idx: int) -> np.ndarray:
        """Exact top-down depth at the heightfield resolution."""
        key = ("hf", idx)
        if key not in self._cache:
            raw = self.raw(idx)
            hf = rendering.render_heightfield(
                raw["scene"], raw["cam_t"], self.cfg.raster.heightfield_n)
            self._cache[key] = hf.values.astype(np.float32)
        return self._cache[key]

    def heightfield_mask(self, idx: int) -> np.ndarray:
        key = ("hfm", idx)
        if key not in self._cache:
            raw = self.raw(idx)
            occ = rendering.occupancy_mask(
                raw["scene"], raw["cam_t"], n=self.cfg.raster.heightfield_n)
            self._cache[key] = occ.astype(np.float32)
        return self._cache[key]

    def depth_condition(self, idx: int) -> tuple[np.ndarray, np.ndarray]:
        """Partial top-down depth from the ground-truth perspective depth:
        backproject, bin into the heightfield, clamp outside the occupancy mask
        to the ground depth. Returns (depth, valid) at heightfield resolution,
        with unobserved cells filled with the ground depth."""
        key = ("cdt", idx)
        if key not in self._cache:
            raw = self.raw(idx)
            n = self.cfg.raster.heightfield_n
            pts = backproject_depth(raw["d_p"], raw["m_p"] > 0, raw["cam_p"])
            hf = project_to_heightfield(pts, raw["cam_t"], n)
            hf = clamp_heightfield(hf, self.heightfield_mask(idx) > 0, raw["cam_t"].height)
            depth = np.where(hf.valid, hf.values, raw["cam_t"].height).astype(np.float32)
            self._cache[key] = (depth, hf.valid.astype(np.float32))
        return self._cache[key]

    def instance_grid(self, idx: int) -> np.ndarray:
        key = ("inst", idx)
        if key not in self._cache:
            self._cache[key] = connected_components(self.heightfield_mask(idx) > 0)
        return self._cache[key]


def hash_file_tree(root) -> str:
    """Stable hash over the dataset manifest, for provenance in reports."""
    import hashlib
    manifest = load_manifest(root)
    blob = json.dumps(manifest, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def config_for_dataset(root) -> PipelineConfig:
    return PipelineConfig.from_dict(load_manifest(root)["config"])
