"""Polynomial color matching between illumination conditions.

A transform maps polynomially expanded RGB values to RGB values and is fit
on the 24 patch correspondences of a Macbeth color checker.  All values are
sRGB-encoded in [0, 1]; no linearization is applied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ShapeError

BASIS_ID = "poly-v1"
N_PATCHES = 24
SVD_RTOL = 1e-10

_FEATURE_COUNTS = {1: 4, 2: 10}


def feature_count(degree: int) -> int:
    try:
        return _FEATURE_COUNTS[degree]
    except KeyError:
        raise ConfigError(f"unsupported polynomial degree {degree!r}; expected 1 or 2") from None


def poly_features(colors, degree: int = 2) -> np.ndarray:
    """Expand colors of shape (..., 3) into polynomial features (..., F).

    Degree 1: [r, g, b, 1].  Degree 2: [r, g, b, r^2, g^2, b^2, rg, gb, rb, 1].
    The ordering is part of the serialized transform format.
    """
    feature_count(degree)
    c = np.asarray(colors, dtype=np.float64)
    if c.shape[-1] != 3:
        raise ShapeError(f"colors must have a trailing axis of length 3, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise DataError("colors contain non-finite values")
    r, g, b = c[..., 0], c[..., 1], c[..., 2]
    one = np.ones_like(r)
    if degree == 1:
        cols = [r, g, b, one]
    else:
        cols = [r, g, b, r * r, g * g, b * b, r * g, g * b, r * b, one]
    return np.stack(cols, axis=-1)


def as_patch_colors(colors, *, check_range: bool = False) -> np.ndarray:
    """Validate and return a (24, 3) float64 array of patch colors."""
    p = np.asarray(colors, dtype=np.float64)
    if p.shape != (N_PATCHES, 3):
        raise ShapeError(f"patch colors must have shape (24, 3), got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise DataError("patch colors contain non-finite values")
    if check_range and (p.min() < 0.0 or p.max() > 1.0):
        raise DataError("patch colors must lie in [0, 1]")
    return p


def load_patch_colors(path) -> np.ndarray:
    with open(path) as fh:
        data = json.load(fh)
    return as_patch_colors(data, check_range=True)


def save_patch_colors(colors, path) -> None:
    p = as_patch_colors(colors, check_range=True)
    Path(path).write_text(json.dumps(p.tolist()) + "\n")


def standard_patch_colors() -> np.ndarray:
    """Reference sRGB colors of the 24-patch chart under the standard illuminant.

    These are the commonly published ColorChecker sRGB values; edit
    ``data/colorchecker_srgb.json`` or pass another file to override them.
    """
    text = resources.files("harmonium").joinpath("data/colorchecker_srgb.json").read_text()
    return as_patch_colors(json.loads(text), check_range=True)


@dataclass(frozen=True)
class PolyTransform:
    degree: int
    matrix: np.ndarray
    fit_residual_rms: float

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (feature_count(self.degree), 3):
            raise ShapeError(
                f"matrix shape {m.shape} does not match degree {self.degree} "
                f"({feature_count(self.degree)} x 3)"
            )
        if not np.all(np.isfinite(m)):
            raise DataError("transform matrix contains non-finite values")
        if not self.fit_residual_rms >= 0.0:
            raise DataError("fit_residual_rms must be nonnegative")
        object.__setattr__(self, "matrix", m)

    def apply_colors(self, colors) -> np.ndarray:
        """Unclamped action on an array of colors (..., 3)."""
        return poly_features(colors, self.degree) @ self.matrix

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "basis_id": BASIS_ID,
            "matrix": self.matrix.tolist(),
            "fit_residual_rms": float(self.fit_residual_rms),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolyTransform":
        if d.get("basis_id") != BASIS_ID:
            raise ConfigError(f"unknown basis_id {d.get('basis_id')!r}")
        return cls(int(d["degree"]), np.array(d["matrix"], dtype=np.float64), float(d["fit_residual_rms"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PolyTransform":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _pinv_solve(a: np.ndarray, b: np.ndarray, rtol: float = SVD_RTOL) -> tuple[np.ndarray, int]:
    u, sv, vt = np.linalg.svd(a, full_matrices=False)
    if sv.size == 0 or sv[0] == 0.0:
        return np.zeros((a.shape[1], b.shape[1])), 0
    keep = sv > rtol * sv[0]
    inv = np.where(keep, 1.0 / np.where(keep, sv, 1.0), 0.0)
    return vt.T @ (inv[:, None] * (u.T @ b)), int(keep.sum())


def fit_transform(src, dst, degree: int = 2, ridge: float = 0.0) -> PolyTransform:
    """Least-squares polynomial matching matrix taking ``src`` patches to ``dst``.

    Minimizes ``sum_k ||phi(src_k) @ M - dst_k||^2 + ridge * ||M||_F^2`` with an
    SVD pseudoinverse (singular values below 1e-10 * sigma_max are dropped), so
    rank-deficient patch sets return the minimum-norm solution.
    """
    s = as_patch_colors(src)
    d = as_patch_colors(dst)
    if not (ridge >= 0.0 and np.isfinite(ridge)):
        raise ConfigError(f"ridge must be a finite nonnegative number, got {ridge!r}")
    phi = poly_features(s, degree)
    a, b = phi, d
    if ridge > 0.0:
        f = phi.shape[1]
        a = np.vstack([phi, np.sqrt(ridge) * np.eye(f)])
        b = np.vstack([d, np.zeros((f, 3))])
    matrix, _ = _pinv_solve(a, b)
    resid = phi @ matrix - d
    return PolyTransform(degree, matrix, float(np.sqrt(np.mean(resid**2))))


def transform_rank(src, degree: int = 2) -> int:
    """Numerical rank of the feature matrix built from ``src`` patches."""
    phi = poly_features(as_patch_colors(src), degree)
    sv = np.linalg.svd(phi, compute_uv=False)
    if sv[0] == 0.0:
        return 0
    return int(np.sum(sv > SVD_RTOL * sv[0]))


def apply_transform(t: PolyTransform, image, mask=None) -> np.ndarray:
    """Apply ``t`` to every pixel (or every masked pixel) of an HxWx3 image.

    Transformed pixels are clamped to [0, 1]; pixels outside the mask are
    copied unchanged.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"image must be HxWx3, got {img.shape}")
    if mask is None:
        return np.clip(t.apply_colors(img), 0.0, 1.0)
    m = np.asarray(mask, dtype=bool)
    if m.shape != img.shape[:2]:
        raise ShapeError(f"mask shape {m.shape} does not match image {img.shape[:2]}")
    out = img.copy()
    if m.any():
        out[m] = np.clip(t.apply_colors(img[m]), 0.0, 1.0)
    return out


def roundtrip_error(src, standard, degree: int = 2, ridge: float = 0.0) -> float:
    """Max per-channel error of src -> standard -> src over the 24 patches."""
    s = as_patch_colors(src)
    forward = fit_transform(s, standard, degree, ridge)
    inverse = fit_transform(standard, s, degree, ridge)
    to_std = np.clip(forward.apply_colors(s), 0.0, 1.0)
    back = np.clip(inverse.apply_colors(to_std), 0.0, 1.0)
    return float(np.max(np.abs(back - s)))
