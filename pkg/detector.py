"""
Detection network with Spatial-Frequency Interaction Modules (SFIM).

An SFIM takes a feature map to the frequency domain with a real-input 2-D
DFT, refines the real and imaginary components with a depthwise 3×3
convolution, a PReLU and a joint 1×1 convolution over the 2C stacked
components, returns to the spatial domain, and finishes with a residual
block. The detector is a three-level U-shaped encoder-decoder with one SFIM
per level and a sigmoid output head.
"""
import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import DetectorError


@dataclass
class FrequencyPair:
    """Half-spectrum real/imaginary components of a (B, C, H, W) feature"""
    real: torch.Tensor
    imag: torch.Tensor
    size: Tuple[int, int]

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise DetectorError(f"real/imag shape mismatch: {tuple(self.real.shape)} vs {tuple(self.imag.shape)}")
        if self.real.shape[-1] != self.size[1] // 2 + 1:
            raise DetectorError(f"half-spectrum width {self.real.shape[-1]} does not match W={self.size[1]}")


def to_frequency(feature: torch.Tensor) -> FrequencyPair:
    spectrum = torch.fft.rfft2(feature, norm="ortho")
    return FrequencyPair(spectrum.real, spectrum.imag, (feature.shape[-2], feature.shape[-1]))


def from_frequency(pair: FrequencyPair) -> torch.Tensor:
    return torch.fft.irfft2(torch.complex(pair.real, pair.imag), s=pair.size, norm="ortho")


class FrequencyRefine(nn.Module):
    """Depthwise 3×3 over each frequency plane, PReLU, joint 1×1 over 2C channels"""

    def __init__(self, channels: int, name: str = "frequency_refine"):
        super().__init__()
        self.channels = channels
        self.name = name
        width = 2 * channels
        self.depthwise = nn.Conv2d(width, width, kernel_size=3, padding=1, groups=width)
        self.act = nn.PReLU(width)
        self.pointwise = nn.Conv2d(width, width, kernel_size=1)

    def identity_(self) -> "FrequencyRefine":
        """Delta depthwise kernels, unit PReLU slope, identity 1×1, zero biases"""
        with torch.no_grad():
            self.depthwise.weight.zero_()
            self.depthwise.weight[:, 0, 1, 1] = 1.0
            self.depthwise.bias.zero_()
            self.act.weight.fill_(1.0)
            self.pointwise.weight.copy_(torch.eye(2 * self.channels).view(2 * self.channels, 2 * self.channels, 1, 1))
            self.pointwise.bias.zero_()
        return self

    def forward(self, pair: FrequencyPair) -> FrequencyPair:
        stacked = torch.cat([pair.real, pair.imag], dim=1)
        out = self.pointwise(self.act(self.depthwise(stacked)))
        if not torch.isfinite(out).all():
            raise DetectorError(f"non-finite output in {self.name}")
        real, imag = out.split(self.channels, dim=1)
        return FrequencyPair(real, imag, pair.size)


def frequency_refine(pair: FrequencyPair, stage: FrequencyRefine) -> FrequencyPair:
    return stage(pair)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.act = nn.GELU()
        self.conv2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)

    def zero_(self) -> "ResidualBlock":
        with torch.no_grad():
            self.conv2.weight.zero_()
            self.conv2.bias.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.act(self.conv1(x)))


class SFIM(nn.Module):
    """Spatial-frequency interaction; ``use_frequency=False`` keeps only the residual block"""

    def __init__(self, channels: int, use_frequency: bool = True, name: str = "sfim"):
        super().__init__()
        self.name = name
        self.use_frequency = use_frequency
        self.refine = FrequencyRefine(channels, name=f"{name}.refine") if use_frequency else None
        self.residual = ResidualBlock(channels)

    def identity_(self) -> "SFIM":
        if self.refine is not None:
            self.refine.identity_()
        self.residual.zero_()
        return self

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        h, w = feature.shape[-2:]
        if min(h, w) < 4:
            raise DetectorError(f"{self.name} needs H, W >= 4, got {h}×{w}")
        x = feature
        if self.refine is not None:
            x = from_frequency(self.refine(to_frequency(feature)))
        return self.residual(x)


def sfim_forward(feature: torch.Tensor, module: SFIM) -> torch.Tensor:
    return module(feature)


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


@dataclass(frozen=True)
class DetectorConfig:
    arch: str = "sfim"
    channels: Tuple[int, int, int] = (16, 32, 64)
    in_channels: int = 1


class SFIDetector(nn.Module):
    """Three-level U-shaped segmenter; SFIM after every encoder stage"""

    def __init__(self, config: DetectorConfig = DetectorConfig()):
        super().__init__()
        if config.arch not in ("sfim", "sfim_no_freq", "plain"):
            raise DetectorError(f"unknown detector architecture {config.arch!r}")
        self.config = config
        c1, c2, c3 = config.channels
        self.enc1 = nn.Sequential(ConvBNReLU(config.in_channels, c1), ConvBNReLU(c1, c1))
        self.enc2 = nn.Sequential(ConvBNReLU(c1, c2), ConvBNReLU(c2, c2))
        self.enc3 = nn.Sequential(ConvBNReLU(c2, c3), ConvBNReLU(c3, c3))
        self.sfims = nn.ModuleList(self._interaction(c, i) for i, c in enumerate(config.channels))
        self.dec2 = nn.Sequential(ConvBNReLU(c3 + c2, c2), ConvBNReLU(c2, c2))
        self.dec1 = nn.Sequential(ConvBNReLU(c2 + c1, c1), ConvBNReLU(c1, c1))
        self.head = nn.Conv2d(c1, 1, kernel_size=1)

    def _interaction(self, channels: int, level: int) -> nn.Module:
        if self.config.arch == "plain":
            return nn.Identity()
        return SFIM(channels, use_frequency=self.config.arch == "sfim", name=f"sfim{level + 1}")

    def zero_head_(self) -> "SFIDetector":
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
        return self

    def check_input(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != self.config.in_channels:
            raise DetectorError(f"expected a (B, {self.config.in_channels}, H, W) batch, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 8 or w % 8 or min(h, w) < 16:
            raise DetectorError(f"detector input must be a multiple of 8 and at least 16 px, got {h}×{w}")

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        self.check_input(images)
        f1 = self.sfims[0](self.enc1(images))
        f2 = self.sfims[1](self.enc2(F.max_pool2d(f1, 2)))
        f3 = self.sfims[2](self.enc3(F.max_pool2d(f2, 2)))
        up2 = F.interpolate(f3, size=f2.shape[-2:], mode="bilinear", align_corners=False)
        d2 = self.dec2(torch.cat([up2, f2], dim=1))
        up1 = F.interpolate(d2, size=f1.shape[-2:], mode="bilinear", align_corners=False)
        d1 = self.dec1(torch.cat([up1, f1], dim=1))
        out = self.head(d1)
        if not torch.isfinite(out).all():
            raise DetectorError("non-finite activations in the detector output")
        return out

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(images))


def build_detector(arch: str = "sfim") -> SFIDetector:
    return SFIDetector(DetectorConfig(arch=arch))


def architecture_fingerprint(model: SFIDetector) -> str:
    """Hash of the architecture hyperparameters and parameter shapes"""
    layout = {
        "config": asdict(model.config),
        "shapes": {k: list(v.shape) for k, v in model.state_dict().items()},
    }
    return hashlib.sha256(json.dumps(layout, sort_keys=True).encode()).hexdigest()


def detector_forward(model: SFIDetector, image: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """Probability map for one H×W image in eval mode"""
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if x.dim() != 2:
        raise DetectorError(f"expected an H×W image, got shape {tuple(x.shape)}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            prob = model(x[None, None])
    finally:
        model.train(was_training)
    return prob[0, 0].cpu().numpy()
