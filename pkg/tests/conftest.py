import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from harmonium import color, dataset  # noqa: E402
from oracles import poly_apply, near_affine_map  # noqa: E402


def make_catalog(root: Path, masks_per_image, size=(16, 20), seed=0):
    """Write a synthetic catalog: smooth images, rectangular masks, patch colors
    that are a mild degree-2 re-lighting of the standard chart."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    std = color.standard_patch_colors()
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    catalog = []
    for i, n_masks in enumerate(masks_per_image):
        img = rng.uniform(0.2, 0.7, 3) + rng.uniform(-0.2, 0.2, 3) * yy[..., None] + rng.uniform(-0.2, 0.2, 3) * xx[..., None]
        img = np.clip(img + rng.normal(scale=0.03, size=img.shape), 0, 1)
        ipath = root / f"img{i}.png"
        dataset.write_image(ipath, dataset.to_uint8(img))
        mpaths = []
        for k in range(n_masks):
            m = np.zeros((h, w), dtype=bool)
            r0, c0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
            m[r0:r0 + rng.integers(3, h // 2), c0:c0 + rng.integers(3, w // 2)] = True
            mp = root / f"img{i}_mask{k}.png"
            dataset.write_mask(mp, m)
            mpaths.append(mp)
        while True:
            patches = poly_apply(near_affine_map(rng, 3e-3), std)
            if patches.min() > 0 and patches.max() < 1:
                break
        catalog.append(dataset.AnnotatedImage(f"im{i}", ipath, tuple(mpaths), patches))
    dataset.save_catalog(catalog, root / "catalog.json")
    return catalog


@pytest.fixture
def toy_catalog(tmp_path):
    return make_catalog(tmp_path / "src", [1, 2, 1, 1, 1])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS.values():
        terminalreporter.write_line(line)
