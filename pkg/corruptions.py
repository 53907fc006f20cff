"""
Image corruption suite: ten photometric/optical degradations at three severities.

Every operator is a pure function of (image, action, seed). Masks are never
touched; only the grayscale image in [0, 1] is degraded.
"""
import functools
import hashlib
import io
import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from errors import CorruptionError

DEFAULT_TABLE_PATH = Path(__file__).with_name("corruption_params.toml")
SEVERITIES = (1, 2, 3)


class CorruptionKind(str, Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SHOT_NOISE = "shot_noise"
    IMPULSE_NOISE = "impulse_noise"
    MOTION_BLUR = "motion_blur"
    DEFOCUS_BLUR = "defocus_blur"
    GAUSSIAN_BLUR = "gaussian_blur"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    PIXELATE = "pixelate"
    JPEG_COMPRESSION = "jpeg_compression"

    @property
    def group(self) -> str:
        return KIND_GROUPS[self]

    @property
    def kind_index(self) -> int:
        return _KIND_ORDER.index(self)


_KIND_ORDER: Tuple[CorruptionKind, ...] = tuple(CorruptionKind)

KIND_GROUPS: Dict[CorruptionKind, str] = {
    CorruptionKind.GAUSSIAN_NOISE: "noise",
    CorruptionKind.SHOT_NOISE: "noise",
    CorruptionKind.IMPULSE_NOISE: "noise",
    CorruptionKind.MOTION_BLUR: "blur",
    CorruptionKind.DEFOCUS_BLUR: "blur",
    CorruptionKind.GAUSSIAN_BLUR: "blur",
    CorruptionKind.BRIGHTNESS: "isp",
    CorruptionKind.CONTRAST: "isp",
    CorruptionKind.PIXELATE: "isp",
    CorruptionKind.JPEG_COMPRESSION: "isp",
}
GROUPS = ("noise", "blur", "isp")

# Kinds whose parameter shrinks as severity grows
_DECREASING = {CorruptionKind.SHOT_NOISE, CorruptionKind.CONTRAST, CorruptionKind.JPEG_COMPRESSION}
_INTEGER_KINDS = {CorruptionKind.MOTION_BLUR, CorruptionKind.DEFOCUS_BLUR,
                  CorruptionKind.PIXELATE, CorruptionKind.JPEG_COMPRESSION}


@dataclass(frozen=True)
class CorruptionAction:
    kind: CorruptionKind
    severity: int

    def __post_init__(self):
        if not isinstance(self.kind, CorruptionKind):
            object.__setattr__(self, "kind", parse_kind(self.kind))
        if self.severity not in SEVERITIES:
            raise CorruptionError(f"severity must be 1, 2 or 3, got {self.severity}")

    @property
    def index(self) -> int:
        return 3 * self.kind.kind_index + (self.severity - 1)

    @classmethod
    def from_index(cls, index: int) -> "CorruptionAction":
        if not 0 <= index < NUM_ACTIONS:
            raise CorruptionError(f"action index must lie in [0, {NUM_ACTIONS}), got {index}")
        return cls(_KIND_ORDER[index // 3], index % 3 + 1)

    def __str__(self) -> str:
        return f"{self.kind.value}@{self.severity}"


NUM_ACTIONS = len(_KIND_ORDER) * len(SEVERITIES)
ACTION_SPACE: Tuple[CorruptionAction, ...] = tuple(
    CorruptionAction(kind, level) for kind in _KIND_ORDER for level in SEVERITIES
)


def parse_kind(name: str) -> CorruptionKind:
    try:
        return CorruptionKind(str(name).strip().lower())
    except ValueError:
        valid = ", ".join(k.value for k in CorruptionKind)
        raise CorruptionError(f"unknown corruption kind '{name}'; valid kinds: {valid}") from None


def parse_severity(value: Union[str, int]) -> int:
    try:
        level = int(value)
    except (TypeError, ValueError):
        raise CorruptionError(f"severity must be an integer in 1..3, got {value!r}") from None
    if level not in SEVERITIES:
        raise CorruptionError(f"severity out of range: {level} (expected 1, 2 or 3)")
    return level


def actions_in_groups(groups: Iterable[str]) -> List[CorruptionAction]:
    groups = set(groups)
    unknown = groups - set(GROUPS)
    if unknown:
        raise CorruptionError(f"unknown corruption group(s): {sorted(unknown)}")
    return [a for a in ACTION_SPACE if a.kind.group in groups]


def action_space_layout() -> List[Dict[str, Union[int, str]]]:
    """Index <-> (kind, severity) table written into checkpoints and reports"""
    return [{"index": a.index, "kind": a.kind.value, "severity": a.severity} for a in ACTION_SPACE]


@dataclass(frozen=True)
class CorruptionTable:
    """Per-kind parameters for severities 1..3"""
    params: Mapping[CorruptionKind, Tuple[float, float, float]]

    def __post_init__(self):
        missing = [k.value for k in CorruptionKind if k not in self.params]
        if missing:
            raise CorruptionError(f"corruption table is missing kinds: {missing}")
        for kind, values in self.params.items():
            if len(values) != 3:
                raise CorruptionError(f"{kind.value} needs exactly 3 severity values, got {list(values)}")
            if not all(math.isfinite(v) and v > 0 for v in values):
                raise CorruptionError(f"{kind.value} values must be finite and positive, got {list(values)}")
            ordered = list(values)[::-1] if kind in _DECREASING else list(values)
            if ordered != sorted(ordered):
                raise CorruptionError(f"{kind.value} magnitude must not decrease with severity, got {list(values)}")
        if max(self.params[CorruptionKind.CONTRAST]) > 1.0:
            raise CorruptionError("contrast factors must lie in (0, 1]")
        if max(self.params[CorruptionKind.JPEG_COMPRESSION]) > 95:
            raise CorruptionError("jpeg quality must lie in 1..95")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Iterable[float]]) -> "CorruptionTable":
        params = {}
        for name, values in data.items():
            kind = parse_kind(name)
            values = tuple(int(v) if kind in _INTEGER_KINDS else float(v) for v in values)
            params[kind] = values
        return cls(params)

    @classmethod
    def load(cls, path: Union[str, Path] = DEFAULT_TABLE_PATH) -> "CorruptionTable":
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise CorruptionError(f"cannot read corruption table {path}: {e}") from e
        return cls.from_mapping(data)

    def with_overrides(self, overrides: Optional[Mapping[str, Iterable[float]]]) -> "CorruptionTable":
        if not overrides:
            return self
        merged = {k.value: list(v) for k, v in self.params.items()}
        merged.update({parse_kind(k).value: list(v) for k, v in overrides.items()})
        return CorruptionTable.from_mapping(merged)

    def value(self, action: CorruptionAction) -> float:
        return self.params[action.kind][action.severity - 1]

    def kernel_size(self, action: CorruptionAction) -> int:
        """Side length of the blur kernel for blur kinds, 1 otherwise"""
        v = self.value(action)
        if action.kind is CorruptionKind.MOTION_BLUR:
            return int(v) | 1
        if action.kind is CorruptionKind.DEFOCUS_BLUR:
            return 2 * int(v) + 1
        if action.kind is CorruptionKind.GAUSSIAN_BLUR:
            return 2 * int(math.ceil(4.0 * v)) + 1
        return 1

    def to_dict(self) -> Dict[str, List[float]]:
        return {k.value: list(self.params[k]) for k in CorruptionKind}

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


@functools.lru_cache(maxsize=1)
def default_table() -> CorruptionTable:
    return CorruptionTable.load(DEFAULT_TABLE_PATH)


# ---------------------------------------------------------------- kernels

def motion_kernel(length: int, angle: float) -> np.ndarray:
    """Normalised line kernel of ``length`` px at ``angle`` radians, bilinearly splatted"""
    size = int(length) | 1
    c = size // 2
    kernel = np.zeros((size, size), dtype=np.float64)
    t = np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, 4 * size)
    xs = c + t * math.cos(angle)
    ys = c - t * math.sin(angle)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    for dy, dx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                      (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy = np.clip(y0 + dy, 0, size - 1)
        xx = np.clip(x0 + dx, 0, size - 1)
        np.add.at(kernel, (yy, xx), w)
    return kernel / kernel.sum()


def disk_kernel(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    kernel = (xx ** 2 + yy ** 2 <= r ** 2).astype(np.float64)
    return kernel / kernel.sum()


# ---------------------------------------------------------------- operators

def _gaussian_noise(x, sigma, rng):
    return x + rng.normal(0.0, sigma, size=x.shape)


def _shot_noise(x, lam, rng):
    return rng.poisson(x * lam).astype(np.float64) / lam


def _impulse_noise(x, p, rng):
    flip = rng.random(x.shape) < p
    salt = rng.random(x.shape) < 0.5
    out = x.copy()
    out[flip] = salt[flip].astype(np.float64)
    return out


def _motion_blur(x, length, rng):
    angle = rng.uniform(0.0, math.pi)
    return ndimage.convolve(x, motion_kernel(int(length), angle), mode="reflect")


def _defocus_blur(x, radius, rng):
    return ndimage.convolve(x, disk_kernel(int(radius)), mode="reflect")


def _gaussian_blur(x, sigma, rng):
    return ndimage.gaussian_filter(x, sigma=sigma, truncate=4.0, mode="reflect")


def _brightness(x, offset, rng):
    return x + offset


def _contrast(x, factor, rng):
    return (x - 0.5) * factor + 0.5


def _pixelate(x, block, rng):
    block = int(block)
    h, w = x.shape
    ph, pw = -h % block, -w % block
    padded = np.pad(x, ((0, ph), (0, pw)), mode="edge")
    H, W = padded.shape
    means = padded.reshape(H // block, block, W // block, block).mean(axis=(1, 3))
    return np.repeat(np.repeat(means, block, axis=0), block, axis=1)[:h, :w]


def _jpeg_compression(x, quality, rng):
    pixels = np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="JPEG", quality=int(quality))
    buffer.seek(0)
    with Image.open(buffer) as decoded:
        return np.asarray(decoded.convert("L"), dtype=np.float64) / 255.0


_OPERATORS = {
    CorruptionKind.GAUSSIAN_NOISE: _gaussian_noise,
    CorruptionKind.SHOT_NOISE: _shot_noise,
    CorruptionKind.IMPULSE_NOISE: _impulse_noise,
    CorruptionKind.MOTION_BLUR: _motion_blur,
    CorruptionKind.DEFOCUS_BLUR: _defocus_blur,
    CorruptionKind.GAUSSIAN_BLUR: _gaussian_blur,
    CorruptionKind.BRIGHTNESS: _brightness,
    CorruptionKind.CONTRAST: _contrast,
    CorruptionKind.PIXELATE: _pixelate,
    CorruptionKind.JPEG_COMPRESSION: _jpeg_compression,
}


def validate_image(image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < 1:
        raise CorruptionError(f"expected a non-empty H×W grayscale image, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise CorruptionError("image contains non-finite pixels")
    if x.min() < -1e-6 or x.max() > 1.0 + 1e-6:
        raise CorruptionError(f"image values must lie in [0, 1], got [{x.min():.4g}, {x.max():.4g}]")
    return np.clip(x, 0.0, 1.0)


def apply(image: np.ndarray, action: CorruptionAction, seed: int,
          table: Optional[CorruptionTable] = None) -> np.ndarray:
    """Realise ``action`` on ``image``; identical (image, action, seed) give identical output"""
    table = table or default_table()
    x = validate_image(image)
    k = table.kernel_size(action)
    if min(x.shape) < k:
        raise CorruptionError(
            f"{action} needs images of at least {k}×{k} px, got {x.shape[0]}×{x.shape[1]}")
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    out = _OPERATORS[action.kind](x, table.value(action), rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def distortion_magnitude(clean: np.ndarray, corrupted: np.ndarray) -> float:
    """Mean absolute pixel difference"""
    a = np.asarray(clean, dtype=np.float64)
    b = np.asarray(corrupted, dtype=np.float64)
    if a.shape != b.shape:
        raise CorruptionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())
