"""
Single-file checkpoint container for a training run
"""
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch
import torch.nn as nn

from config import TrainConfig
from corruptions import CorruptionTable, action_space_layout
from detector import architecture_fingerprint, build_detector
from errors import CheckpointError
from logger import app_logger

CHECKPOINT_FORMAT = "balistd-checkpoint"
CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.pt"


def weights_fingerprint(module: nn.Module) -> str:
    """SHA-256 over parameter and buffer names and raw bytes"""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class LoadedCheckpoint:
    """Validated checkpoint contents, ready to rebuild a training state"""
    train_config: TrainConfig
    step: int
    arch: str
    detector_state: Dict[str, torch.Tensor]
    strategy_state: Dict[str, torch.Tensor]
    optimizer_state: Dict[str, Any]
    baseline_state: Dict[str, Any]
    rng_state: Dict[str, Any]
    table: CorruptionTable
    path: Path


def save_checkpoint(path: Union[str, Path], state, cfg: TrainConfig, table: CorruptionTable) -> Path:
    """Write detector, strategy, optimizer, baseline and rng state into one file"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    train = dict(vars(cfg))
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "action_space": action_space_layout(),
        "corruption_table": table.to_dict(),
        "corruption_digest": table.digest(),
        "arch": cfg.arch,
        "arch_fingerprint": architecture_fingerprint(state.detector),
        "train_config": train,
        "step": int(state.step),
        "detector": state.detector.state_dict(),
        "strategy": state.strategy.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "baseline": state.baseline.state_dict(),
        "rng": json.dumps(state.rng.bit_generator.state, sort_keys=True),
    }
    try:
        torch.save(payload, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    app_logger.info(f"checkpoint saved to {path}", step=int(state.step),
                    detector=weights_fingerprint(state.detector)[:12])
    return path


def _require(payload: Dict[str, Any], key: str, path: Path):
    if key not in payload:
        raise CheckpointError(f"{path}: missing field '{key}'")
    return payload[key]


def load_checkpoint(path: Union[str, Path], expected_arch: Optional[str] = None) -> LoadedCheckpoint:
    """Read and validate a checkpoint; weights are not bound to modules here"""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    version = _require(payload, "version", path)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    if _require(payload, "action_space", path) != action_space_layout():
        raise CheckpointError(f"{path}: action-space layout differs from this build")

    table = CorruptionTable.from_mapping(_require(payload, "corruption_table", path))
    if table.digest() != _require(payload, "corruption_digest", path):
        raise CheckpointError(f"{path}: corruption table digest does not match its contents")

    arch = _require(payload, "arch", path)
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"{path}: architecture mismatch, checkpoint has {arch!r}, expected {expected_arch!r}")
    try:
        reference = build_detector(arch)
    except Exception as e:
        raise CheckpointError(f"{path}: cannot build architecture {arch!r}: {e}") from e
    if architecture_fingerprint(reference) != _require(payload, "arch_fingerprint", path):
        raise CheckpointError(f"{path}: architecture fingerprint mismatch for {arch!r}")

    train = dict(_require(payload, "train_config", path))
    try:
        train_config = TrainConfig(**train)
        train_config.validate()
    except Exception as e:
        raise CheckpointError(f"{path}: invalid stored train config: {e}") from e

    return LoadedCheckpoint(
        train_config=train_config,
        step=int(_require(payload, "step", path)),
        arch=arch,
        detector_state=_require(payload, "detector", path),
        strategy_state=_require(payload, "strategy", path),
        optimizer_state=_require(payload, "optimizer", path),
        baseline_state=_require(payload, "baseline", path),
        rng_state=json.loads(_require(payload, "rng", path)),
        table=table,
        path=path,
    )
