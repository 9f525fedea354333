"""Folder-per-class ingestion, deterministic splits, preprocessing and synthetic data."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset

from .errors import ConfigurationError, IngestionError, InputError, ResourceError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")
SPLITS = ("train", "val", "test")
DEFAULT_IMAGE_SIZE = 224
# ImageNet statistics; the teachers' pretrained weights expect them
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
KVASIR_V2_EXCLUDED = ("dyed-lifted-polyps", "dyed-resection-margins")


@dataclass(frozen=True)
class ImageRecord:
    path: str
    label: int
    split: str = "unassigned"


@dataclass
class DatasetManifest:
    root_path: str
    class_map: dict[str, int]
    records: list[ImageRecord]
    excluded_classes: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    split_config: "SplitConfig | None" = None

    @property
    def num_classes(self):
        return len(self.class_map)

    @property
    def class_names(self):
        return sorted(self.class_map, key=self.class_map.get)

    def subset(self, split: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == split]

    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for r in self.records:
            counts[r.split] = counts.get(r.split, 0) + 1
        return counts

    def abspath(self, record: ImageRecord) -> Path:
        return Path(self.root_path) / record.path


@dataclass(frozen=True)
class SplitConfig:
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    stratified: bool = True

    def validate(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ConfigurationError(f"ratios must be three non-negative numbers, got {self.ratios}", "split.ratios")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigurationError(f"ratios must sum to 1, got {sum(self.ratios)}", "split.ratios")
        return self


def _normalize_class_name(name: str) -> str:
    return re.sub(r"[\s_]+", "-", name.strip().lower())


def _readable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (OSError, UnidentifiedImageError, SyntaxError):
        return False


def ingest_folder_dataset(root, exclude=(), verify: bool = True) -> DatasetManifest:
    """Scan ``<root>/<class>/<image>`` into a manifest.

    Classes are indexed in lexicographic order after exclusion. Files that fail
    to decode are skipped with a warning and listed in ``manifest.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    excluded = {_normalize_class_name(e) for e in exclude}
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    kept = [p for p in class_dirs if _normalize_class_name(p.name) not in excluded]
    dropped = [p.name for p in class_dirs if p not in kept]
    if not kept:
        raise IngestionError(f"no classes found under {root} after exclusion")
    class_map = {p.name: i for i, p in enumerate(sorted(kept, key=lambda p: p.name))}
    records, skipped = [], []
    for class_dir in kept:
        files = sorted(
            f for f in class_dir.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES
        )
        for f in files:
            rel = f.relative_to(root).as_posix()
            if verify and not _readable(f):
                log.warning("skipping unreadable image %s", f)
                skipped.append(rel)
                continue
            records.append(ImageRecord(rel, class_map[class_dir.name]))
    if not records:
        raise IngestionError(f"no readable images under {root}")
    if skipped:
        log.warning("skipped %d unreadable file(s) under %s", len(skipped), root)
    records.sort(key=lambda r: r.path)
    return DatasetManifest(str(root), class_map, records, dropped, skipped)


def _largest_remainder(n: int, ratios) -> list[int]:
    exact = [n * r for r in ratios]
    counts = [int(np.floor(x)) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(manifest: DatasetManifest, cfg: SplitConfig) -> DatasetManifest:
    cfg.validate()
    if any(r.split != "unassigned" for r in manifest.records):
        raise ConfigurationError("manifest already has split assignments", "split")
    rng = np.random.default_rng(cfg.seed)
    ordered = sorted(manifest.records, key=lambda r: r.path)
    if cfg.stratified:
        groups = [[r for r in ordered if r.label == c] for c in sorted(set(manifest.class_map.values()))]
    else:
        groups = [ordered]
    assigned = {}
    for group in groups:
        perm = rng.permutation(len(group))
        counts = _largest_remainder(len(group), cfg.ratios)
        bounds = np.cumsum([0] + counts)
        for split, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
            for idx in perm[lo:hi]:
                assigned[group[idx].path] = split
    records = [replace(r, split=assigned[r.path]) for r in manifest.records]
    return replace(manifest, records=records, split_config=cfg)


def save_split_sidecar(manifest: DatasetManifest, path) -> Path:
    cfg = manifest.split_config
    if cfg is None:
        raise ConfigurationError("manifest has no split to save", "split")
    doc = {
        "seed": cfg.seed,
        "ratios": list(cfg.ratios),
        "stratified": cfg.stratified,
        "root": str(Path(manifest.root_path).resolve()),
        "class_map": manifest.class_map,
        "excluded_classes": manifest.excluded_classes,
        "assignments": [{"path": r.path, "split": r.split} for r in sorted(manifest.records, key=lambda r: r.path)],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_split_sidecar(path, root=None) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ResourceError(f"split sidecar not found: {path}")
    doc = json.loads(path.read_text())
    root = Path(root or doc["root"])
    class_map = {k: int(v) for k, v in doc["class_map"].items()}
    records = []
    for a in doc["assignments"]:
        class_name = a["path"].split("/", 1)[0]
        if class_name not in class_map:
            raise InputError(f"sidecar entry {a['path']} has unknown class {class_name}")
        records.append(ImageRecord(a["path"], class_map[class_name], a["split"]))
    cfg = SplitConfig(tuple(doc["ratios"]), int(doc["seed"]), bool(doc.get("stratified", True)))
    return DatasetManifest(str(root), class_map, records, list(doc.get("excluded_classes", [])), [], cfg)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def load_image(path) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except (OSError, UnidentifiedImageError) as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from exc


def _to_pil(image) -> Image.Image:
    if isinstance(image, Image.Image):
        return image
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim == 3 and arr.shape[-1] == 2:  # gray + alpha
        arr = arr[..., 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[-1] not in (3, 4)):
        raise InputError(f"unsupported image array shape {arr.shape}")
    if arr.size == 0:
        raise InputError("empty image")
    if np.issubdtype(arr.dtype, np.floating):
        arr = (np.clip(arr, 0.0, 1.0) * 255).round().astype(np.uint8)
    elif arr.dtype != np.uint8:
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    return Image.fromarray(arr)


def preprocess(image, size: int = DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """Decoded image -> float32 array 3 x size x size, ImageNet-standardized.

    Plain bilinear resize (aspect ratio not preserved); grayscale is replicated
    to three channels and alpha is dropped.
    """
    if isinstance(image, (str, Path)):
        image = load_image(image)
    pil = _to_pil(image)
    if pil.width < 1 or pil.height < 1:
        raise InputError("image must be at least 1x1")
    if pil.mode != "RGB":
        pil = pil.convert("RGB")
    pil = pil.resize((size, size), Image.BILINEAR)
    arr = np.asarray(pil, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(IMAGENET_MEAN, np.float32)) / np.asarray(IMAGENET_STD, np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def denormalize(array: np.ndarray) -> np.ndarray:
    """Inverse of the standardization step; returns H x W x 3 in [0, 1]."""
    arr = array.transpose(1, 2, 0) * np.asarray(IMAGENET_STD) + np.asarray(IMAGENET_MEAN)
    return np.clip(arr, 0.0, 1.0)


class ManifestDataset(Dataset):
    """Yields ``(image, label, index)`` for one split; optionally caches decoded arrays."""

    def __init__(self, manifest: DatasetManifest, split: str | None, image_size=DEFAULT_IMAGE_SIZE, cache=True):
        self.manifest = manifest
        self.records = manifest.records if split is None else manifest.subset(split)
        self.image_size = image_size
        self.cache = {} if cache else None

    def __len__(self):
        return len(self.records)

    def labels(self):
        return [r.label for r in self.records]

    def __getitem__(self, index):
        record = self.records[index]
        if self.cache is not None and index in self.cache:
            x = self.cache[index]
        else:
            x = torch.from_numpy(preprocess(self.manifest.abspath(record), self.image_size))
            if self.cache is not None:
                self.cache[index] = x
        return x, record.label, index


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

MAX_ORIENTATIONS = 6


def synth_image(label: int, num_classes: int, rng: np.random.Generator, size: int = 64, noise: float = 0.15):
    """One image: a sinusoidal grating patch over a flat background plus pixel noise.

    The label fixes the grating orientation (and, past six classes, its period
    band); colours, phase, period jitter and patch placement are random, so
    only the oriented texture identifies the class.
    """
    n_orient = min(num_classes, MAX_ORIENTATIONS)
    angle = np.pi * (label % n_orient) / n_orient
    band = label // n_orient
    period = rng.uniform(5.0, 8.0) + 4.0 * band
    phase = rng.uniform(0.0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase)
    bg, fg = rng.uniform(0.0, 0.5, 3), rng.uniform(0.5, 1.0, 3)
    h, w = (int(rng.integers(size // 3, 2 * size // 3 + 1)) for _ in range(2))
    y0, x0 = int(rng.integers(0, size - h + 1)), int(rng.integers(0, size - w + 1))
    mask = np.zeros((size, size))
    mask[y0:y0 + h, x0:x0 + w] = 1.0
    img = bg + (mask * wave)[..., None] * (fg - bg)
    img = img + rng.normal(0.0, noise, img.shape)
    return Image.fromarray((np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8))


def synth_dataset(num_classes: int, per_class: int, seed: int, out_root, size: int = 64, noise: float = 0.15):
    """Write a folder-per-class PNG dataset and return its ingested manifest."""
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2", "classes")
    if per_class < 1:
        raise ConfigurationError("per_class must be >= 1", "per_class")
    out_root = Path(out_root)
    try:
        for c in range(num_classes):
            class_dir = out_root / f"class_{c:02d}"
            class_dir.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                rng = np.random.default_rng([seed, c, i])
                synth_image(c, num_classes, rng, size, noise).save(class_dir / f"img_{i:05d}.png", format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write synthetic dataset to {out_root}: {exc}") from exc
    return ingest_folder_dataset(out_root)
