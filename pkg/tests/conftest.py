import numpy as np
import pytest

from citysketch.config import PipelineConfig, tiny_config
from citysketch.scene import generate_scene, place_cameras


@pytest.fixture(scope="session")
def cfg() -> PipelineConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def small_scene(cfg):
    return generate_scene(7, cfg.scene)


@pytest.fixture(scope="session")
def rig(cfg, small_scene):
    return place_cameras(small_scene, cfg.camera, cfg.raster.resolution)


def rasterize_footprints(scene, cam_t, n):
    xx, yy = cam_t.cell_centers(n=n)
    return scene.occupied(xx, yy)


def flood_fill_labels(mask: np.ndarray) -> np.ndarray:
    """Brute-force 8-connected labeling by BFS, first-occurrence ordering."""
    mask = np.asarray(mask) > 0
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.int32)
    k = 0
    for si in range(h):
        for sj in range(w):
            if not mask[si, sj] or out[si, sj]:
                continue
            k += 1
            stack = [(si, sj)]
            out[si, sj] = k
            while stack:
                i, j = stack.pop()
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        ni, nj = i + di, j + dj
                        if 0 <= ni < h and 0 <= nj < w and mask[ni, nj] and not out[ni, nj]:
                            out[ni, nj] = k
                            stack.append((ni, nj))
    return out
