"""
Losses and evaluation metrics: soft-IoU loss, pixel IoU, target-level Pd/Fa, RCE.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from scipy import ndimage

from config import TargetMatchConfig
from corruptions import CorruptionKind
from errors import MetricError

SOFT_IOU_EPS = 1.0
_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)

ArrayLike = Union[np.ndarray, torch.Tensor]


def soft_iou_loss(pred: ArrayLike, mask: ArrayLike, eps: float = SOFT_IOU_EPS,
                  reduction: str = "mean") -> torch.Tensor:
    """1 - (sum p*y + eps) / (sum p + sum y - sum p*y + eps), per sample over (C, H, W)

    Accepts a single H×W map or a (B, ...) batch; ``reduction`` is "mean" or "none".
    """
    p = torch.as_tensor(pred)
    y = torch.as_tensor(mask, dtype=p.dtype, device=p.device)
    if p.shape != y.shape:
        raise MetricError(f"shape mismatch: pred {tuple(p.shape)} vs mask {tuple(y.shape)}")
    if not torch.all((y == 0) | (y == 1)):
        raise MetricError("mask must be strictly binary")
    if p.dim() <= 2:
        p, y = p.unsqueeze(0), y.unsqueeze(0)
    dims = tuple(range(1, p.dim()))
    inter = (p * y).sum(dim=dims)
    union = p.sum(dim=dims) + y.sum(dim=dims) - inter
    loss = 1.0 - (inter + eps) / (union + eps)
    if reduction == "none":
        return loss
    if reduction == "mean":
        return loss.mean()
    raise MetricError(f"unknown reduction {reduction!r}")


def binarize(prob: ArrayLike, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(prob) >= threshold


def _as_binary(a: ArrayLike, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.isin(a, (0, 1)).all():
            raise MetricError(f"{name} must be binary")
        a = a.astype(bool)
    return a


def iou(pred: ArrayLike, mask: ArrayLike) -> float:
    """|pred ∩ mask| / |pred ∪ mask|; 1 when both are empty"""
    p = _as_binary(pred, "pred")
    y = _as_binary(mask, "mask")
    if p.shape != y.shape:
        raise MetricError(f"shape mismatch: pred {p.shape} vs mask {y.shape}")
    union = np.logical_or(p, y).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, y).sum() / union)


@dataclass
class TargetCounts:
    """Raw counts behind Pd/Fa for one image"""
    targets: int
    detected: int
    false_pixels: int
    pixels: int

    @property
    def pd(self) -> float:
        return 1.0 if self.targets == 0 else self.detected / self.targets

    @property
    def fa(self) -> float:
        return self.false_pixels / self.pixels


def _components(binary: np.ndarray) -> Tuple[List[Tuple[float, float]], np.ndarray, np.ndarray]:
    labels, n = ndimage.label(binary, structure=_EIGHT_CONNECTED)
    if n == 0:
        return [], labels, np.zeros(0, dtype=int)
    index = np.arange(1, n + 1)
    centroids = ndimage.center_of_mass(binary, labels, index)
    sizes = ndimage.sum_labels(binary, labels, index).astype(int)
    return [tuple(c) for c in centroids], labels, sizes


def target_counts(pred: ArrayLike, mask: ArrayLike,
                  cfg: TargetMatchConfig = TargetMatchConfig()) -> TargetCounts:
    p = _as_binary(pred, "pred")
    y = _as_binary(mask, "mask")
    if p.shape != y.shape:
        raise MetricError(f"shape mismatch: pred {p.shape} vs mask {y.shape}")
    gt_centroids, _, _ = _components(y)
    pred_centroids, _, pred_sizes = _components(p)

    pairs = []
    for gi, g in enumerate(gt_centroids):
        for pj, q in enumerate(pred_centroids):
            d = math.hypot(g[0] - q[0], g[1] - q[1])
            if d <= cfg.match_distance:
                # ties broken by position so the result ignores label order
                pairs.append((d, g, q, gi, pj))
    pairs.sort(key=lambda t: t[:3])

    used_gt, used_pred = set(), set()
    for _, _, _, gi, pj in pairs:
        if gi in used_gt or pj in used_pred:
            continue
        used_gt.add(gi)
        used_pred.add(pj)

    false_pixels = int(sum(size for pj, size in enumerate(pred_sizes) if pj not in used_pred))
    return TargetCounts(targets=len(gt_centroids), detected=len(used_gt),
                        false_pixels=false_pixels, pixels=int(p.size))


def pd_fa(pred: ArrayLike, mask: ArrayLike,
          cfg: TargetMatchConfig = TargetMatchConfig()) -> Tuple[float, float]:
    """Probability of detection and false-alarm rate for one image"""
    counts = target_counts(pred, mask, cfg)
    return counts.pd, counts.fa


def rce(iou_clean: float, iou_cor: float) -> Optional[float]:
    """Relative corruption error in percent; None when the clean IoU is not positive"""
    if not iou_clean > 0:
        return None
    return 100.0 * (iou_clean - iou_cor) / iou_clean


@dataclass
class RobustnessRecord:
    iou_clean: float
    iou_cor: float
    rce: Optional[float]
    pd: float
    fa: float
    kind: Optional[CorruptionKind] = None
    severity: Optional[int] = None

    def __post_init__(self):
        for name in ("iou_clean", "iou_cor"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise MetricError(f"{name} must lie in [0, 1], got {value}")
        if self.fa < 0:
            raise MetricError(f"fa must be >= 0, got {self.fa}")


@dataclass
class RobustnessAccumulator:
    """Dataset-level aggregation: mean per-image IoU, pooled Pd and Fa"""
    cfg: TargetMatchConfig = field(default_factory=TargetMatchConfig)
    ious: List[float] = field(default_factory=list)
    targets: int = 0
    detected: int = 0
    false_pixels: int = 0
    pixels: int = 0

    def add(self, pred: ArrayLike, mask: ArrayLike) -> None:
        self.ious.append(iou(pred, mask))
        counts = target_counts(pred, mask, self.cfg)
        self.targets += counts.targets
        self.detected += counts.detected
        self.false_pixels += counts.false_pixels
        self.pixels += counts.pixels

    def __len__(self) -> int:
        return len(self.ious)

    def summary(self) -> Tuple[float, float, float]:
        if not self.ious:
            raise MetricError("no images accumulated")
        pd = 1.0 if self.targets == 0 else self.detected / self.targets
        return float(np.mean(self.ious)), pd, self.false_pixels / self.pixels


AGGREGATE_COLUMNS = ["dataset", "scope", "name", "iou_clean", "iou_cor", "rce", "pd", "fa", "fa_e6", "seed"]
RECORD_COLUMNS = ["dataset", "kind", "severity", "iou_clean", "iou_cor", "rce", "pd", "fa", "fa_e6", "seed"]


def _mean_record(records: List[RobustnessRecord], iou_clean: float) -> RobustnessRecord:
    iou_cor = float(np.mean([r.iou_cor for r in records]))
    return RobustnessRecord(
        iou_clean=iou_clean,
        iou_cor=iou_cor,
        rce=rce(iou_clean, iou_cor),
        pd=float(np.mean([r.pd for r in records])),
        fa=float(np.mean([r.fa for r in records])),
    )


@dataclass
class RobustnessReport:
    """Clean row, one row per evaluated action, and the aggregates derived from them"""
    clean: RobustnessRecord
    records: List[RobustnessRecord] = field(default_factory=list)
    dataset: str = "test"
    seed: int = 0
    table_digest: str = ""
    arch: str = ""

    def kind_averages(self) -> Dict[CorruptionKind, RobustnessRecord]:
        by_kind: Dict[CorruptionKind, List[RobustnessRecord]] = {}
        for record in self.records:
            by_kind.setdefault(record.kind, []).append(record)
        return {kind: _mean_record(rows, self.clean.iou_clean) for kind, rows in by_kind.items()}

    def group_averages(self) -> Dict[str, RobustnessRecord]:
        by_group: Dict[str, List[RobustnessRecord]] = {}
        for record in self.records:
            by_group.setdefault(record.kind.group, []).append(record)
        return {group: _mean_record(rows, self.clean.iou_clean) for group, rows in by_group.items()}

    def grid_average(self) -> Optional[RobustnessRecord]:
        if not self.records:
            return None
        return _mean_record(self.records, self.clean.iou_clean)

    @property
    def row_count(self) -> int:
        """Clean + per-action rows + per-kind, per-group and grid aggregates"""
        aggregates = len(self.kind_averages()) + len(self.group_averages()) + (1 if self.records else 0)
        return 1 + len(self.records) + aggregates

    def _row(self, record: RobustnessRecord, **keys) -> Dict[str, object]:
        return {
            "dataset": self.dataset,
            **keys,
            "iou_clean": record.iou_clean,
            "iou_cor": record.iou_cor,
            "rce": np.nan if record.rce is None else record.rce,
            "pd": record.pd,
            "fa": record.fa,
            "fa_e6": record.fa * 1e6,
            "seed": self.seed,
        }

    def to_frame(self) -> pd.DataFrame:
        """Data rows: the clean row first, then one row per (kind, severity)"""
        rows = [self._row(self.clean, kind="clean", severity=0)]
        rows += [self._row(r, kind=r.kind.value, severity=r.severity) for r in self.records]
        return pd.DataFrame(rows, columns=RECORD_COLUMNS)

    def summary_frame(self) -> pd.DataFrame:
        rows = [self._row(r, scope="kind", name=k.value) for k, r in self.kind_averages().items()]
        rows += [self._row(r, scope="group", name=g) for g, r in self.group_averages().items()]
        grid = self.grid_average()
        if grid is not None:
            rows.append(self._row(grid, scope="grid", name="average"))
        return pd.DataFrame(rows, columns=AGGREGATE_COLUMNS)
