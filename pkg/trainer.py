"""
Bi-level training loop and robustness evaluation.

Every iteration runs three sub-steps in a fixed order:

1. realise one corruption per sample (uniformly in joint mode, from the
   strategy network in adversarial mode);
2. one Adam step on the detector for soft_iou(x) + lambda * soft_iou(x_hat);
3. in adversarial mode, one gradient-ascent step on the strategy network
   using the corrupted-branch per-sample losses of step 2 as rewards.
"""
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from checkpoint import CHECKPOINT_NAME, LoadedCheckpoint, save_checkpoint
from config import TargetMatchConfig, TrainConfig
from corruptions import (ACTION_SPACE, NUM_ACTIONS, CorruptionAction, CorruptionTable,
                         actions_in_groups, apply, default_table)
from datasets import ImageSample
from detector import SFIDetector, build_detector, detector_forward
from errors import DatasetError, MetricError, TrainingError
from logger import app_logger
from metrics import RobustnessAccumulator, RobustnessRecord, RobustnessReport, binarize, iou, rce, soft_iou_loss
from strategy import (RewardBaseline, RewardRecord, StrategyNet, action_mask, policy_forward,
                      reinforce_gradient, sample_index, strategy_step)

# Independent random streams per (step, sample)
STREAM_BATCH = 0
STREAM_AUGMENT = 1
STREAM_ACTION = 2
STREAM_CORRUPT = 3
STREAM_EVAL = 4

LOG_NAME = "train_log.csv"
LOG_COLUMNS = ["step", "clean_loss", "cor_loss", "E_hat", "baseline", "action_histogram", "val_iou"]

Predictor = Callable[[np.ndarray], np.ndarray]


def derive_seed(seed: int, step: int, index: int, stream: int) -> int:
    """64-bit seed for one (run seed, step, sample, stream) tuple"""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(step), int(index), int(stream)]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


@dataclass
class TrainState:
    detector: SFIDetector
    strategy: StrategyNet
    optimizer: torch.optim.Optimizer
    baseline: RewardBaseline
    rng: np.random.Generator
    step: int = 0


@dataclass
class StepLosses:
    clean_loss: float
    cor_loss: Optional[float]
    total: float
    rewards: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class TrainResult:
    state: TrainState
    log: pd.DataFrame


def init_state(cfg: TrainConfig) -> TrainState:
    """Freshly initialised detector and strategy, deterministic given cfg.seed"""
    torch.manual_seed(int(cfg.seed) & 0xFFFFFFFFFFFFFFFF)
    detector = build_detector(cfg.arch)
    strategy = StrategyNet()
    return TrainState(
        detector=detector,
        strategy=strategy,
        optimizer=torch.optim.Adam(detector.parameters(), lr=cfg.lr_d),
        baseline=RewardBaseline(cfg.baseline_decay, cfg.use_baseline),
        rng=np.random.default_rng(derive_seed(cfg.seed, 0, 0, STREAM_BATCH)),
    )


def restore_state(loaded: LoadedCheckpoint) -> TrainState:
    state = init_state(loaded.train_config)
    state.detector.load_state_dict(loaded.detector_state)
    state.strategy.load_state_dict(loaded.strategy_state)
    state.optimizer.load_state_dict(loaded.optimizer_state)
    state.baseline.load_state_dict(loaded.baseline_state)
    state.rng.bit_generator.state = loaded.rng_state
    state.step = loaded.step
    return state


def allowed_actions(cfg: TrainConfig) -> Optional[List[int]]:
    """Action indices the run may sample, or None for the full grid"""
    if cfg.action_subset == "all":
        return None
    return [a.index for a in actions_in_groups([cfg.action_subset])]


# ---------------------------------------------------------------- augmentation

def flip(image: np.ndarray, mask: np.ndarray, horizontal: bool, vertical: bool) -> Tuple[np.ndarray, np.ndarray]:
    if horizontal:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if vertical:
        image, mask = image[::-1, :], mask[::-1, :]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def augment(image: np.ndarray, mask: np.ndarray, cfg: TrainConfig, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Random flips (p = 0.5 each) and a uniform crop to cfg.crop, shared by image and mask"""
    h, w = image.shape
    if h < cfg.crop or w < cfg.crop:
        raise DatasetError(f"image of {h}×{w} px is smaller than the {cfg.crop}×{cfg.crop} crop")
    rng = np.random.default_rng(seed)
    horizontal = bool(rng.random() < 0.5)
    vertical = bool(rng.random() < 0.5)
    top = int(rng.integers(0, h - cfg.crop + 1))
    left = int(rng.integers(0, w - cfg.crop + 1))
    image, mask = flip(image, mask, horizontal, vertical)
    window = (slice(top, top + cfg.crop), slice(left, left + cfg.crop))
    return image[window].copy(), mask[window].copy()


# ---------------------------------------------------------------- corrupted batch

def sample_actions(state: TrainState, images: np.ndarray, cfg: TrainConfig) -> List[RewardRecord]:
    """One action per image: uniform in joint mode, drawn from the strategy in adversarial mode"""
    allowed = allowed_actions(cfg)
    records = []
    if cfg.mode == "joint":
        pool = allowed if allowed is not None else list(range(NUM_ACTIONS))
        log_prob = -math.log(len(pool))
        for i in range(len(images)):
            rng = np.random.default_rng(derive_seed(cfg.seed, state.step, i, STREAM_ACTION))
            records.append(RewardRecord(pool[int(rng.integers(len(pool)))], log_prob))
        return records

    mask = action_mask(allowed)
    x = torch.from_numpy(np.asarray(images, dtype=np.float32)[:, None])
    for i, dist in enumerate(policy_forward(state.strategy, x, mask)):
        index, log_prob = sample_index(dist, derive_seed(cfg.seed, state.step, i, STREAM_ACTION))
        records.append(RewardRecord(index, log_prob))
    return records


def generate_corrupted_batch(state: TrainState, images: np.ndarray, cfg: TrainConfig,
                             table: Optional[CorruptionTable] = None) -> Tuple[np.ndarray, List[RewardRecord]]:
    """Corrupted partner for every image plus the records that will carry rewards"""
    table = table or default_table()
    records = sample_actions(state, images, cfg)

    def realise(i: int) -> np.ndarray:
        action = CorruptionAction.from_index(records[i].action_index)
        return apply(images[i], action, derive_seed(cfg.seed, state.step, i, STREAM_CORRUPT), table)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            corrupted = list(pool.map(realise, range(len(images))))
    else:
        corrupted = [realise(i) for i in range(len(images))]
    return np.stack(corrupted).astype(np.float32), records


def action_histogram(records: Sequence[RewardRecord]) -> np.ndarray:
    return np.bincount([r.action_index for r in records], minlength=NUM_ACTIONS)


# ---------------------------------------------------------------- detector step

def detector_loss(model: nn.Module, images: torch.Tensor, masks: torch.Tensor,
                  corrupted: Optional[torch.Tensor], lam: float):
    """(mean total loss, per-sample clean loss, per-sample corrupted loss or None)

    Clean and corrupted batches go through separate forward passes so batch
    statistics never mix the two.
    """
    clean = soft_iou_loss(model(images), masks, reduction="none")
    if corrupted is None:
        return clean.mean(), clean, None
    if lam > 0:
        cor = soft_iou_loss(model(corrupted), masks, reduction="none")
        return (clean + lam * cor).mean(), clean, cor
    with torch.no_grad():
        cor = soft_iou_loss(model(corrupted), masks, reduction="none")
    return clean.mean(), clean, cor


def detector_step(state: TrainState, images: np.ndarray, masks: np.ndarray,
                  corrupted: Optional[np.ndarray], cfg: TrainConfig,
                  sample_ids: Optional[Sequence[str]] = None) -> StepLosses:
    """One Adam step on L^D; rewards are the corrupted per-sample losses before the update"""
    ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(len(images))]
    for name, batch in (("image", images), ("corrupted image", corrupted)):
        if batch is None:
            continue
        finite = np.isfinite(np.asarray(batch)).reshape(len(batch), -1).all(axis=1)
        if not finite.all():
            offending = [ids[i] for i in np.flatnonzero(~finite)]
            raise TrainingError(f"non-finite {name} at step {state.step} for sample(s): {', '.join(offending)}")

    model = state.detector
    model.train()
    x = torch.from_numpy(np.asarray(images, dtype=np.float32)[:, None])
    y = torch.from_numpy(np.asarray(masks, dtype=np.float32)[:, None])
    x_hat = None if corrupted is None else torch.from_numpy(np.asarray(corrupted, dtype=np.float32)[:, None])

    total, clean, cor = detector_loss(model, x, y, x_hat, cfg.lam)
    per_sample = clean if cor is None else clean + cfg.lam * cor
    bad = ~torch.isfinite(per_sample.detach())
    if cor is not None:
        bad |= ~torch.isfinite(cor.detach())
    if bad.any():
        offending = [ids[i] for i in torch.nonzero(bad).flatten().tolist()]
        app_logger.log_error(TrainingError("non-finite loss"), f"detector step {state.step}")
        raise TrainingError(f"non-finite loss at step {state.step} for sample(s): {', '.join(offending)}")

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()

    rewards = np.zeros(0) if cor is None else cor.detach().double().numpy()
    return StepLosses(
        clean_loss=float(clean.detach().mean()),
        cor_loss=None if cor is None else float(cor.detach().mean()),
        total=float(total.detach()),
        rewards=rewards,
    )


def update_strategy(state: TrainState, images: np.ndarray, records: List[RewardRecord],
                    rewards: np.ndarray, cfg: TrainConfig) -> float:
    """Attach rewards, ascend the REINFORCE gradient, then advance the EMA baseline"""
    for record, reward in zip(records, rewards):
        record.reward = float(reward)
    baseline = state.baseline.current(rewards)
    x = torch.from_numpy(np.asarray(images, dtype=np.float32)[:, None])
    gradient = reinforce_gradient(state.strategy, x, records, baseline, action_mask(allowed_actions(cfg)))
    strategy_step(state.strategy, gradient, cfg.lr_s)
    state.baseline.update(rewards)
    return baseline


# ---------------------------------------------------------------- training loop

def _fit_to_detector(image: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Crop to the largest multiple of 8 the detector accepts"""
    h, w = (image.shape[0] // 8) * 8, (image.shape[1] // 8) * 8
    if min(h, w) < 16:
        raise DatasetError(f"image of {image.shape[0]}×{image.shape[1]} px is too small for the detector")
    return image[:h, :w], mask[:h, :w]


def validation_iou(detector: SFIDetector, samples: Sequence[ImageSample], threshold: float = 0.5) -> float:
    """Mean per-image IoU of the binarised prediction on clean images"""
    if not samples:
        raise DatasetError("validation set is empty")
    scores = []
    for sample in samples:
        image, mask = _fit_to_detector(sample.image, sample.mask)
        scores.append(iou(binarize(detector_forward(detector, image), threshold), mask))
    return float(np.mean(scores))


def _append_log(path: Optional[Path], row: dict, header: bool) -> None:
    if path is not None:
        pd.DataFrame([row], columns=LOG_COLUMNS).to_csv(path, mode="a", header=header, index=False)


def train(cfg: TrainConfig, samples: Sequence[ImageSample],
          val_samples: Optional[Sequence[ImageSample]] = None,
          out_dir: Optional[Union[str, Path]] = None,
          table: Optional[CorruptionTable] = None) -> TrainResult:
    """Run ``cfg.steps`` iterations; with ``out_dir`` the log and final checkpoint are written there"""
    cfg.validate()
    if not samples:
        raise DatasetError("training set is empty")
    for sample in samples:
        if min(sample.image.shape) < cfg.crop:
            raise DatasetError(
                f"{sample.sample_id}: {sample.image.shape[0]}×{sample.image.shape[1]} px is smaller than crop {cfg.crop}")
    table = table or default_table()
    torch.set_num_threads(cfg.workers)
    state = init_state(cfg)
    clean_only = cfg.mode == "joint" and cfg.lam == 0

    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / LOG_NAME
        pd.DataFrame(columns=LOG_COLUMNS).to_csv(log_path, index=False)

    app_logger.info("training started", mode=cfg.mode, steps=cfg.steps, arch=cfg.arch,
                    action_subset=cfg.action_subset, clean_only=clean_only)
    started = time.perf_counter()
    rows = []
    for _ in range(cfg.steps):
        picks = state.rng.integers(0, len(samples), size=cfg.batch_size)
        batch = [samples[int(j)] for j in picks]
        pairs = [augment(s.image, s.mask, cfg, derive_seed(cfg.seed, state.step, i, STREAM_AUGMENT))
                 for i, s in enumerate(batch)]
        images = np.stack([p[0] for p in pairs]).astype(np.float32)
        masks = np.stack([p[1] for p in pairs]).astype(np.float32)
        ids = [s.sample_id for s in batch]

        records: List[RewardRecord] = []
        corrupted = None
        if not clean_only:
            corrupted, records = generate_corrupted_batch(state, images, cfg, table)

        losses = detector_step(state, images, masks, corrupted, cfg, sample_ids=ids)

        baseline = None
        if cfg.mode == "adversarial":
            baseline = update_strategy(state, images, records, losses.rewards, cfg)

        state.step += 1
        e_hat = float(losses.rewards.mean()) if losses.rewards.size else None
        val = None
        if val_samples and cfg.eval_every and state.step % cfg.eval_every == 0:
            val = validation_iou(state.detector, val_samples)
            app_logger.info(f"step {state.step}: val_iou={val:.4f}")
        if state.step % cfg.log_every == 0:
            app_logger.log_step(state.step, losses.clean_loss,
                                losses.cor_loss if losses.cor_loss is not None else float("nan"),
                                e_hat, baseline if baseline is not None else float("nan"))

        row = {
            "step": state.step,
            "clean_loss": losses.clean_loss,
            "cor_loss": losses.cor_loss,
            "E_hat": e_hat,
            "baseline": baseline,
            "action_histogram": " ".join(str(c) for c in action_histogram(records)),
            "val_iou": val,
        }
        _append_log(log_path, row, header=False)
        rows.append(row)

    app_logger.log_performance("training", time.perf_counter() - started)
    if out_dir is not None:
        save_checkpoint(out_dir / CHECKPOINT_NAME, state, cfg, table)
    return TrainResult(state=state, log=pd.DataFrame(rows, columns=LOG_COLUMNS))


# ---------------------------------------------------------------- robustness evaluation

def as_predictor(model: Union[nn.Module, Predictor]) -> Predictor:
    if isinstance(model, nn.Module):
        return lambda image: detector_forward(model, image)
    return model


def _evaluate(predict: Predictor, images: Sequence[np.ndarray], masks: Sequence[np.ndarray],
              match: TargetMatchConfig) -> Tuple[float, float, float]:
    acc = RobustnessAccumulator(match)
    for image, mask in zip(images, masks):
        acc.add(binarize(predict(image), match.binarize_threshold), mask)
    return acc.summary()


def evaluate_robustness(model: Union[nn.Module, Predictor], samples: Sequence[ImageSample],
                        grid: Sequence[CorruptionAction] = ACTION_SPACE,
                        table: Optional[CorruptionTable] = None,
                        match: TargetMatchConfig = TargetMatchConfig(),
                        seed: int = 0, workers: int = 1, dataset: str = "test",
                        arch: str = "") -> RobustnessReport:
    """Clean and per-action IoU/Pd/Fa with RCE against the same run's clean IoU"""
    if not samples:
        raise MetricError("cannot evaluate on an empty dataset")
    table = table or default_table()
    predict = as_predictor(model)
    fitted = [_fit_to_detector(s.image, s.mask) for s in samples]
    images = [f[0] for f in fitted]
    masks = [f[1] for f in fitted]

    clean_iou, clean_pd, clean_fa = _evaluate(predict, images, masks, match)
    report = RobustnessReport(
        clean=RobustnessRecord(clean_iou, clean_iou, rce(clean_iou, clean_iou) if clean_iou > 0 else None,
                               clean_pd, clean_fa),
        dataset=dataset, seed=seed, table_digest=table.digest(), arch=arch,
    )
    started = time.perf_counter()
    for action in grid:
        def realise(i: int) -> np.ndarray:
            return apply(images[i], action, derive_seed(seed, action.index, i, STREAM_EVAL), table)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                corrupted = list(pool.map(realise, range(len(images))))
        else:
            corrupted = [realise(i) for i in range(len(images))]
        cor_iou, pd_value, fa_value = _evaluate(predict, corrupted, masks, match)
        report.records.append(RobustnessRecord(clean_iou, cor_iou, rce(clean_iou, cor_iou),
                                               pd_value, fa_value, kind=action.kind, severity=action.severity))
        app_logger.debug(f"evaluated {action}", iou=cor_iou, pd=pd_value, fa=fa_value)
    app_logger.log_performance("robustness evaluation", time.perf_counter() - started)
    return report
