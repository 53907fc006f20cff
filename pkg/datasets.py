"""
Synthetic infrared-like scenes and the on-disk image/mask dataset layout.

Layout of a dataset directory::

    images/<id>.png     8-bit grayscale
    masks/<id>.png      8-bit, 0 / 255
    splits.txt          "<id> train" or "<id> test", one per line
    MANIFEST.sha        SHA-256 over every file above
"""
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from config import SynthConfig
from errors import DatasetError
from logger import app_logger

MAX_TARGET_AREA = 81
MIN_TARGET_AREA = 3
# an open disk of this radius covers at least MIN_TARGET_AREA pixel centres
MIN_TARGET_RADIUS = 1.5
MAX_SHAPE_ATTEMPTS = 100
SPLITS_FILE = "splits.txt"
MANIFEST_FILE = "MANIFEST.sha"
SPLIT_TAGS = ("train", "test")
# semi-axis of the half-maximum ellipse in units of the Gaussian sigma
_HALF_MAX = math.sqrt(2.0 * math.log(2.0))


@dataclass
class ImageSample:
    image: np.ndarray
    mask: np.ndarray
    sample_id: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DatasetError(f"{self.sample_id}: image {self.image.shape} and mask {self.mask.shape} differ")


@dataclass
class ManifestEntry:
    sample_id: str
    image_path: Path
    mask_path: Path
    split: str


@dataclass
class DatasetManifest:
    root: Path
    entries: List[ManifestEntry]
    content_hash: str

    def split(self, tag: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]


# ---------------------------------------------------------------- synthesis

def _background(rng: np.random.Generator, size: int, clutter_scale: float) -> np.ndarray:
    low = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 8.0, mode="wrap")
    low = (low - low.mean()) / (low.std() + 1e-12)
    texture = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=1.0, mode="wrap")
    texture = texture / (texture.std() + 1e-12)
    base = rng.uniform(0.2, 0.4)
    return base + clutter_scale * 0.5 * low + 0.02 * texture


def _target_profile(size: int, center: Tuple[float, float], semi_axes: Tuple[float, float],
                    angle: float) -> np.ndarray:
    """Unit-peak anisotropic Gaussian whose half-maximum contour has ``semi_axes``"""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    su, sv = semi_axes[0] / _HALF_MAX, semi_axes[1] / _HALF_MAX
    return np.exp(-0.5 * ((u / su) ** 2 + (v / sv) ** 2))


def _place_targets(rng: np.random.Generator, cfg: SynthConfig, n: int):
    r_max = cfg.target_radius[1]
    margin = r_max + 2.0
    spacing = 2.0 * r_max + 3.0
    centers: List[Tuple[float, float]] = []
    for _ in range(200 * n):
        if len(centers) == n:
            break
        c = (rng.uniform(margin, cfg.size - margin), rng.uniform(margin, cfg.size - margin))
        if all(math.hypot(c[0] - o[0], c[1] - o[1]) >= spacing for o in centers):
            centers.append(c)
    if not centers:
        raise DatasetError(f"cannot place targets in a {cfg.size}×{cfg.size} scene")
    return centers


def _scene(rng: np.random.Generator, cfg: SynthConfig) -> Tuple[np.ndarray, np.ndarray]:
    size = cfg.size
    background = _background(rng, size, cfg.clutter_scale)
    n = int(rng.integers(cfg.targets_per_image[0], cfg.targets_per_image[1] + 1))
    image = background.copy()
    mask = np.zeros((size, size), dtype=bool)
    for anchor in _place_targets(rng, cfg, n):
        center = anchor
        for _ in range(MAX_SHAPE_ATTEMPTS):
            axes = (rng.uniform(*cfg.target_radius), rng.uniform(*cfg.target_radius))
            angle = rng.uniform(0.0, math.pi)
            profile = _target_profile(size, center, axes, angle)
            target = profile > 0.5
            if MIN_TARGET_AREA <= target.sum() <= MAX_TARGET_AREA:
                break
            # sub-pixel jitter around the placed centre
            center = (anchor[0] + rng.uniform(-0.5, 0.5), anchor[1] + rng.uniform(-0.5, 0.5))
        else:
            raise DatasetError(
                f"target radius range {cfg.target_radius} gives no mask of "
                f"{MIN_TARGET_AREA}..{MAX_TARGET_AREA} px after {MAX_SHAPE_ATTEMPTS} draws")
        image += rng.uniform(*cfg.target_contrast) * profile
        mask |= target
    image = np.clip(image, 0.0, 1.0)
    # quantised to 8 bits so a disk round trip is exact
    image = np.round(image * 255.0).astype(np.uint8).astype(np.float32) / 255.0
    return image, mask.astype(np.uint8)


def synth_generate(cfg: SynthConfig) -> List[ImageSample]:
    """Deterministic synthetic scenes with small, low-contrast Gaussian targets"""
    cfg.validate()
    if math.pi * cfg.target_radius[1] ** 2 > MAX_TARGET_AREA:
        raise DatasetError(
            f"target radius {cfg.target_radius[1]} exceeds the small-target bound of {MAX_TARGET_AREA} px")
    if cfg.target_radius[0] < MIN_TARGET_RADIUS:
        raise DatasetError(
            f"target radius range {cfg.target_radius} starts below {MIN_TARGET_RADIUS} px; "
            f"masks could fall under {MIN_TARGET_AREA} px")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.count)
    samples = []
    for i, seq in enumerate(seeds):
        image, mask = _scene(np.random.default_rng(seq), cfg)
        samples.append(ImageSample(image=image, mask=mask, sample_id=f"synth_{i:05d}"))
    return samples


# ---------------------------------------------------------------- disk IO

def manifest_hash(root: Union[str, Path]) -> str:
    """SHA-256 over relative paths and bytes of images/, masks/ and the splits file"""
    root = Path(root)
    files = sorted(p for d in ("images", "masks") for p in (root / d).glob("*.png"))
    files.append(root / SPLITS_FILE)
    digest = hashlib.sha256()
    for path in files:
        digest.update(path.relative_to(root).as_posix().encode())
        digest.update(b"\0")
        digest.update(path.read_bytes())
    return digest.hexdigest()


def write_dataset(samples: Sequence[ImageSample], root: Union[str, Path],
                  test_fraction: float = 0.2) -> str:
    """Write samples in the on-disk layout; the last ``test_fraction`` of them form the test split"""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    n_test = int(round(len(samples) * test_fraction))
    lines = []
    for i, sample in enumerate(samples):
        pixels = np.round(np.clip(sample.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels).save(root / "images" / f"{sample.sample_id}.png")
        Image.fromarray((np.asarray(sample.mask) > 0).astype(np.uint8) * 255).save(
            root / "masks" / f"{sample.sample_id}.png")
        tag = "test" if i >= len(samples) - n_test else "train"
        lines.append(f"{sample.sample_id} {tag}\n")
    (root / SPLITS_FILE).write_text("".join(lines))
    content_hash = manifest_hash(root)
    (root / MANIFEST_FILE).write_text(content_hash + "\n")
    app_logger.info(f"wrote {len(samples)} samples to {root}", manifest=content_hash)
    return content_hash


def read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "1", "P", "I;16"):
                raise DatasetError(f"{path.name}: expected a single-channel image, got mode {img.mode}")
            if img.mode == "P":
                if img.getpalette() and any(
                        len(set(img.getpalette()[i:i + 3])) > 1 for i in range(0, len(img.getpalette()), 3)):
                    raise DatasetError(f"{path.name}: palette image is not grayscale")
            if img.mode == "I;16":
                return (np.asarray(img, dtype=np.float64) / 257.0).round().astype(np.uint8)
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as e:
        raise DatasetError(f"cannot read {path}: {e}") from e


def load_manifest(root: Union[str, Path]) -> DatasetManifest:
    """Validate a dataset directory and return its manifest"""
    root = Path(root)
    splits_path = root / SPLITS_FILE
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    if not splits_path.exists():
        if not any(root.iterdir()):
            raise DatasetError(f"no entries in {root}")
        raise DatasetError(f"missing {SPLITS_FILE} in {root}")

    entries = []
    seen = set()
    for lineno, line in enumerate(splits_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in SPLIT_TAGS:
            raise DatasetError(f"{SPLITS_FILE}:{lineno}: expected '<id> train|test', got {line!r}")
        sample_id, tag = parts
        if sample_id in seen:
            raise DatasetError(f"{SPLITS_FILE}:{lineno}: duplicate id {sample_id}")
        seen.add(sample_id)
        image_path = root / "images" / f"{sample_id}.png"
        mask_path = root / "masks" / f"{sample_id}.png"
        if not image_path.exists():
            raise DatasetError(f"missing image for {sample_id}: {image_path}")
        if not mask_path.exists():
            raise DatasetError(f"missing mask for {sample_id}: {mask_path}")
        image = read_gray(image_path)
        mask = read_gray(mask_path)
        if image.shape != mask.shape:
            raise DatasetError(
                f"dimension mismatch: {image_path.name} is {image.shape[1]}×{image.shape[0]} "
                f"but {mask_path.name} is {mask.shape[1]}×{mask.shape[0]}")
        entries.append(ManifestEntry(sample_id, image_path, mask_path, tag))

    if not entries:
        raise DatasetError(f"no entries in {root}")
    return DatasetManifest(root=root, entries=entries, content_hash=manifest_hash(root))


def load_samples(manifest: DatasetManifest, split: str = "train") -> List[ImageSample]:
    """Images scaled to [0, 1]; masks binarised at 128"""
    if split not in SPLIT_TAGS:
        raise DatasetError(f"split must be one of {SPLIT_TAGS}, got {split!r}")
    samples = []
    for entry in manifest.split(split):
        image = read_gray(entry.image_path).astype(np.float32) / 255.0
        mask = (read_gray(entry.mask_path) >= 128).astype(np.uint8)
        samples.append(ImageSample(image=image, mask=mask, sample_id=entry.sample_id))
    return samples
