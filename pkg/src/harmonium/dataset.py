"""Construction of (composite, real, mask) triplets by transitive color transfer.

The foreground of a source image is mapped to the standard illumination with
the source's forward matching matrix, then into the illumination of a
reference image with that reference's inverse matrix, and pasted back onto
the untouched source background.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import color
from .errors import BuildError, DataError, PreconditionError, ShapeError

log = logging.getLogger(__name__)

MANIFEST_VERSION = "ccharmony-manifest/1"
SPLITS = ("train", "test")


@dataclass(frozen=True)
class AnnotatedImage:
    id: str
    image_path: Path
    mask_paths: tuple[Path, ...]
    patch_colors: np.ndarray

    def __post_init__(self):
        if not 1 <= len(self.mask_paths) <= 2:
            raise DataError(f"image {self.id!r} must have 1 or 2 masks, got {len(self.mask_paths)}")
        object.__setattr__(self, "image_path", Path(self.image_path))
        object.__setattr__(self, "mask_paths", tuple(Path(p) for p in self.mask_paths))
        object.__setattr__(self, "patch_colors", color.as_patch_colors(self.patch_colors, check_range=True))

    def to_record(self, base: Path | None = None) -> dict:
        def rel(p: Path) -> str:
            return str(p.relative_to(base)) if base is not None and p.is_relative_to(base) else str(p)

        return {
            "id": self.id,
            "image_path": rel(self.image_path),
            "mask_paths": [rel(p) for p in self.mask_paths],
            "patch_colors": self.patch_colors.tolist(),
        }


def load_catalog(path) -> list[AnnotatedImage]:
    """Read a catalog JSON list; relative paths resolve against the catalog's directory."""
    path = Path(path)
    base = path.parent
    with open(path) as fh:
        records = json.load(fh)
    out = []
    for rec in records:
        out.append(
            AnnotatedImage(
                id=str(rec["id"]),
                image_path=base / rec["image_path"],
                mask_paths=tuple(base / p for p in rec["mask_paths"]),
                patch_colors=np.asarray(rec["patch_colors"], dtype=np.float64),
            )
        )
    ids = [a.id for a in out]
    if len(set(ids)) != len(ids):
        raise DataError("catalog image ids are not unique")
    return out


def save_catalog(catalog, path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    records = [a.to_record(base) for a in catalog]
    path.write_text(json.dumps(records, indent=1) + "\n")


def read_image(path) -> np.ndarray:
    """Load an 8-bit RGB image as uint8 HxWx3."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_mask(path) -> np.ndarray:
    """Load a mask as a boolean HxW array (foreground = gray level > 127)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8) > 127


def write_image(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def to_unit(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _fit_checked(src, dst, degree, ridge, image_id) -> color.PolyTransform:
    try:
        rank = color.transform_rank(src, degree)
        if rank < color.feature_count(degree):
            raise DataError(f"patch colors span rank {rank} < {color.feature_count(degree)} features")
        return color.fit_transform(src, dst, degree, ridge)
    except (DataError, ShapeError) as exc:
        raise BuildError(f"degenerate color fit for image {image_id!r}: {exc}") from exc


def transfer_pixels(image, mask, to_standard: color.PolyTransform, from_standard: color.PolyTransform) -> np.ndarray:
    """Two-stage transfer of the masked pixels of a float image in [0, 1]."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise PreconditionError("foreground mask is empty")
    stage = color.apply_transform(to_standard, image, m)
    return color.apply_transform(from_standard, stage, m)


def transfer_foreground(source: AnnotatedImage, mask, reference: AnnotatedImage, standard,
                        degree: int = 2, ridge: float = 0.0, *, image=None) -> np.ndarray:
    """Re-light the masked foreground of ``source`` into the illumination of ``reference``.

    Returns a float image; background pixels are the source pixels unchanged.
    ``image`` may carry the already decoded source pixels (uint8 or float).
    """
    if image is None:
        image = read_image(source.image_path)
    img = to_unit(image) if np.asarray(image).dtype == np.uint8 else np.asarray(image, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if m.shape != img.shape[:2]:
        raise ShapeError(f"mask {m.shape} does not match image {source.id!r} of size {img.shape[:2]}")
    to_std = _fit_checked(source.patch_colors, standard, degree, ridge, source.id)
    from_std = _fit_checked(standard, reference.patch_colors, degree, ridge, reference.id)
    return transfer_pixels(img, m, to_std, from_std)


@dataclass(frozen=True)
class SplitSpec:
    """Image-level train/test split: explicit test ids win over the fraction."""

    test_fraction: float = 0.25
    test_ids: tuple[str, ...] | None = None

    def assign(self, ids: list[str], seed: int) -> dict[str, str]:
        if self.test_ids is not None:
            unknown = set(self.test_ids) - set(ids)
            if unknown:
                raise DataError(f"test ids not in catalog: {sorted(unknown)}")
            test = set(self.test_ids)
        else:
            if not 0.0 <= self.test_fraction <= 1.0:
                raise DataError("test_fraction must lie in [0, 1]")
            rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
            order = rng.permutation(len(ids))
            n_test = int(round(self.test_fraction * len(ids)))
            test = {ids[i] for i in order[:n_test]}
        return {i: ("test" if i in test else "train") for i in ids}

    def to_dict(self) -> dict:
        return {"test_fraction": self.test_fraction,
                "test_ids": list(self.test_ids) if self.test_ids is not None else None}


@dataclass(frozen=True)
class PlannedEntry:
    source_id: str
    mask_index: int
    reference_id: str
    split: str

    @property
    def stem(self) -> str:
        return f"{self.source_id}_{self.mask_index}_{self.reference_id}"


def plan_entries(catalog, references_per_foreground: int, seed: int,
                 split_spec: SplitSpec | None = None) -> list[PlannedEntry]:
    """Sample reference images for every (image, mask) pair without touching pixels.

    References are drawn uniformly without replacement from the rest of the
    catalog.  The plan depends only on catalog order, mask counts and seed.
    """
    if not catalog:
        raise PreconditionError("catalog is empty")
    n = len(catalog)
    if not 1 <= references_per_foreground <= n - 1:
        raise PreconditionError(
            f"references_per_foreground must be in [1, {n - 1}], got {references_per_foreground}"
        )
    split_spec = split_spec or SplitSpec()
    ids = [a.id for a in catalog]
    splits = split_spec.assign(ids, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    plan = []
    for idx, item in enumerate(catalog):
        others = [j for j in range(n) if j != idx]
        for mask_index in range(len(item.mask_paths)):
            picks = rng.choice(len(others), size=references_per_foreground, replace=False)
            for p in picks:
                plan.append(PlannedEntry(item.id, mask_index, catalog[others[p]].id, splits[item.id]))
    return plan


@dataclass(frozen=True)
class ManifestEntry:
    composite_path: str
    real_path: str
    mask_path: str
    source_id: str
    mask_index: int
    reference_id: str
    split: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    config: dict = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "config": self.config,
            "entries": [asdict(e) for e in self.entries],
            "failures": self.failures,
        }

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        with open(path) as fh:
            d = json.load(fh)
        if d.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {d.get('version')!r}")
        entries = [ManifestEntry(**e) for e in d["entries"]]
        return cls(path.parent, entries, d.get("config", {}), d.get("failures", []))


@dataclass(frozen=True)
class BuildConfig:
    references_per_foreground: int = 10
    seed: int = 0
    degree: int = 2
    ridge: float = 0.0
    split: SplitSpec = field(default_factory=SplitSpec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = self.split.to_dict()
        return d


def build_dataset(catalog, standard, out_dir, config: BuildConfig | None = None, jobs: int = 1) -> DatasetManifest:
    """Write composites, real images, masks and ``manifest.json`` under ``out_dir``.

    Failures (unreadable files, size mismatches, degenerate fits) are collected
    across the whole run; if any occurred the partial manifest is still written
    and a :class:`BuildError` listing all of them is raised at the end.
    """
    config = config or BuildConfig()
    standard = color.as_patch_colors(standard, check_range=True)
    out = Path(out_dir)
    for sub in ("real", "masks", "composites"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    plan = plan_entries(catalog, config.references_per_foreground, config.seed, config.split)
    by_id = {a.id: a for a in catalog}
    failures: list[str] = []

    pixels: dict[str, np.ndarray] = {}
    masks: dict[tuple[str, int], np.ndarray] = {}
    to_std: dict[str, color.PolyTransform] = {}
    from_std: dict[str, color.PolyTransform] = {}
    for item in catalog:
        try:
            pixels[item.id] = read_image(item.image_path)
        except (OSError, ValueError) as exc:
            failures.append(f"{item.id}: unreadable image {item.image_path}: {exc}")
        for k, mp in enumerate(item.mask_paths):
            try:
                masks[item.id, k] = read_mask(mp)
            except (OSError, ValueError) as exc:
                failures.append(f"{item.id}: unreadable mask {mp}: {exc}")
        try:
            to_std[item.id] = _fit_checked(item.patch_colors, standard, config.degree, config.ridge, item.id)
            from_std[item.id] = _fit_checked(standard, item.patch_colors, config.degree, config.ridge, item.id)
        except BuildError as exc:
            failures.append(str(exc))

    for item in catalog:
        if item.id not in pixels:
            continue
        write_image(out / "real" / f"{item.id}.png", pixels[item.id])
        for k in range(len(item.mask_paths)):
            m = masks.get((item.id, k))
            if m is None:
                continue
            if m.shape != pixels[item.id].shape[:2]:
                failures.append(f"{item.id}: mask {k} size {m.shape} != image size {pixels[item.id].shape[:2]}")
                del masks[item.id, k]
            elif not m.any():
                failures.append(f"{item.id}: mask {k} is empty")
                del masks[item.id, k]
            else:
                write_mask(out / "masks" / f"{item.id}_{k}.png", m)

    def build_one(p: PlannedEntry):
        src = pixels.get(p.source_id)
        m = masks.get((p.source_id, p.mask_index))
        if src is None or m is None or p.source_id not in to_std or p.reference_id not in from_std:
            return None
        fg = transfer_pixels(to_unit(src), m, to_std[p.source_id], from_std[p.reference_id])
        comp = src.copy()
        comp[m] = to_uint8(fg[m])
        rel = f"composites/{p.stem}.png"
        write_image(out / rel, comp)
        return ManifestEntry(rel, f"real/{p.source_id}.png", f"masks/{p.source_id}_{p.mask_index}.png",
                             p.source_id, p.mask_index, p.reference_id, p.split)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(build_one, plan))
    else:
        results = [build_one(p) for p in plan]
    entries = [e for e in results if e is not None]
    skipped = len(plan) - len(entries)
    if skipped and not failures:
        failures.append(f"{skipped} planned entries were skipped")

    cfg = config.to_dict()
    cfg["standard_patch_colors"] = standard.tolist()
    manifest = DatasetManifest(out, entries, cfg, failures)
    manifest.save()
    log.info("built %d entries (%d planned) into %s", len(entries), len(plan), out)
    if failures:
        raise BuildError(f"{len(failures)} failure(s) while building dataset:\n" + "\n".join(failures), failures)
    return manifest


@dataclass(frozen=True)
class Violation:
    kind: str
    entry: int | None
    detail: str


@dataclass
class ValidationReport:
    n_entries: int
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    def count(self, kind: str) -> int:
        return sum(v.kind == kind for v in self.violations)

    def to_dict(self) -> dict:
        return {"n_entries": self.n_entries, "ok": self.ok, "violations": [asdict(v) for v in self.violations]}


def validate_manifest(manifest: DatasetManifest) -> ValidationReport:
    """Check files, sizes, background equality and split hygiene; never raises on violations."""
    viol: list[Violation] = []
    seen: dict[tuple, int] = {}
    split_of: dict[str, set] = {}
    for i, e in enumerate(manifest.entries):
        key = (e.source_id, e.reference_id, e.mask_index)
        if key in seen:
            viol.append(Violation("duplicate-entry", i, f"same triplet as entry {seen[key]}"))
        seen.setdefault(key, i)
        if e.reference_id == e.source_id:
            viol.append(Violation("self-reference", i, e.source_id))
        if e.split not in SPLITS:
            viol.append(Violation("bad-split", i, e.split))
        split_of.setdefault(e.source_id, set()).add(e.split)

        paths = {"composite": e.composite_path, "real": e.real_path, "mask": e.mask_path}
        missing = [f"{k}={v}" for k, v in paths.items() if not manifest.resolve(v).is_file()]
        if missing:
            viol.append(Violation("missing-path", i, ", ".join(missing)))
            continue
        try:
            comp = read_image(manifest.resolve(e.composite_path))
            real = read_image(manifest.resolve(e.real_path))
            mask = read_mask(manifest.resolve(e.mask_path))
        except (OSError, ValueError) as exc:
            viol.append(Violation("unreadable", i, str(exc)))
            continue
        if not (comp.shape == real.shape and mask.shape == comp.shape[:2]):
            viol.append(Violation("size-mismatch", i,
                                  f"composite {comp.shape}, real {real.shape}, mask {mask.shape}"))
            continue
        bad = np.any(comp[~mask] != real[~mask], axis=-1)
        if bad.any():
            viol.append(Violation("background-mismatch", i, f"{int(bad.sum())} background pixel(s) differ"))
    for sid, splits in sorted(split_of.items()):
        if len(splits) > 1:
            viol.append(Violation("split-overlap", None, f"{sid} appears in {sorted(splits)}"))
    return ValidationReport(len(manifest.entries), viol)
