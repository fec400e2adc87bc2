"""Harmonization metrics on a 0-255 scale: MSE, fMSE, PSNR and foreground SSIM."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import PreconditionError, ShapeError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2

SSIM_PARAMS = {
    "window": SSIM_WINDOW,
    "sigma": SSIM_SIGMA,
    "c1": SSIM_C1,
    "c2": SSIM_C2,
    "padding": "symmetric",
    "scale": 255,
}

CSV_FIELDS = ("image_id", "mse", "fmse", "psnr", "fssim", "foreground_ratio")


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return p, g


def _fg(mask, shape):
    m = np.asarray(mask, dtype=bool)
    if m.shape != shape[:2]:
        raise ShapeError(f"mask shape {m.shape} does not match image {shape[:2]}")
    if not m.any():
        raise PreconditionError("mask has no foreground pixels")
    return m


def mse(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean((255.0 * p - 255.0 * g) ** 2))


def fmse(pred, gt, mask) -> float:
    p, g = _pair(pred, gt)
    m = _fg(mask, p.shape)
    return float(np.mean((255.0 * p[m] - 255.0 * g[m]) ** 2))


def psnr_from_mse(value: float) -> float:
    if value < 255.0**2 * 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0**2 / value))


def psnr(pred, gt) -> float:
    return psnr_from_mse(mse(pred, gt))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(pred, gt) -> np.ndarray:
    """Per-pixel SSIM averaged over channels (HxW), symmetric border padding."""
    p, g = _pair(pred, gt)
    if p.ndim == 2:
        p, g = p[..., None], g[..., None]
    if min(p.shape[:2]) < SSIM_WINDOW:
        raise PreconditionError(f"image {p.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = gaussian_window()
    maps = []
    for c in range(p.shape[2]):
        x = 255.0 * p[..., c]
        y = 255.0 * g[..., c]

        def blur(a):
            return ndimage.correlate(a, w, mode="reflect")

        mx, my = blur(x), blur(y)
        sxx = blur(x * x) - mx * mx
        syy = blur(y * y) - my * my
        sxy = blur(x * y) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        maps.append(num / den)
    # cancellation in the variance terms can push values a few ulps past the bounds
    return np.clip(np.mean(maps, axis=0), -1.0, 1.0)


def fssim(pred, gt, mask) -> float:
    p, g = _pair(pred, gt)
    m = _fg(mask, p.shape)
    return float(np.mean(ssim_map(p, g)[m]))


@dataclass(frozen=True)
class MetricReport:
    image_id: str
    mse: float
    fmse: float
    psnr: float
    fssim: float
    foreground_ratio: float


def evaluate_pair(image_id: str, pred, gt, mask) -> MetricReport:
    m = np.asarray(mask, dtype=bool)
    return MetricReport(
        image_id=image_id,
        mse=mse(pred, gt),
        fmse=fmse(pred, gt, m),
        psnr=psnr(pred, gt),
        fssim=fssim(pred, gt, m),
        foreground_ratio=float(m.mean()),
    )


def aggregate(reports) -> dict:
    """Unweighted per-image means of every metric."""
    reports = list(reports)
    if not reports:
        return {k: float("nan") for k in CSV_FIELDS[1:]}
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in CSV_FIELDS[1:]}


@dataclass
class Evaluation:
    reports: list[MetricReport]
    means: dict
    missing: list[str]

    @property
    def complete(self) -> bool:
        return not self.missing

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.reports:
            w.writerow([r.image_id] + [repr(getattr(r, k)) for k in CSV_FIELDS[1:]])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "n_images": len(self.reports),
            "aggregation": "unweighted per-image mean",
            "means": self.means,
            "missing": self.missing,
            "complete": self.complete,
            "ssim": SSIM_PARAMS,
            "psnr_cap_db": PSNR_CAP,
        }

    def table(self) -> str:
        m = self.means
        head = f"{'images':>8} {'MSE':>10} {'fMSE':>10} {'PSNR':>8} {'fSSIM':>8}"
        row = f"{len(self.reports):>8} {m['mse']:>10.2f} {m['fmse']:>10.2f} {m['psnr']:>8.2f} {m['fssim']:>8.4f}"
        lines = [head, row]
        if self.missing:
            lines.append(f"INCOMPLETE: {len(self.missing)} prediction(s) missing")
        return "\n".join(lines)

    def write(self, out_dir, config: dict | None = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.to_csv())
        summary = self.summary()
        summary["config"] = config or {}
        (out / "aggregate.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def evaluate_manifest(manifest, predictions_dir, jobs: int = 1) -> Evaluation:
    """Score predictions named like each entry's composite file against the real image.

    Missing predictions are listed and excluded from the means.  Report order
    follows the manifest regardless of ``jobs``.
    """
    from .dataset import read_image, read_mask, to_unit

    pred_dir = Path(predictions_dir)
    todo, missing = [], []
    for e in manifest.entries:
        name = Path(e.composite_path).name
        if (pred_dir / name).is_file():
            todo.append((name, e))
        else:
            missing.append(name)

    def score(item):
        name, e = item
        pred = to_unit(read_image(pred_dir / name))
        gt = to_unit(read_image(manifest.resolve(e.real_path)))
        mask = read_mask(manifest.resolve(e.mask_path))
        return evaluate_pair(Path(name).stem, pred, gt, mask)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(score, todo))
    else:
        reports = [score(t) for t in todo]
    return Evaluation(reports, aggregate(reports), missing)


def report_dict(r: MetricReport) -> dict:
    return asdict(r)
