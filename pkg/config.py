"""
Configuration management for BALISTD
"""
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import tomli_w
from dotenv import load_dotenv

from errors import ConfigError

# Load environment variables
load_dotenv()

SEED_ENV_VAR = "BALISTD_SEED"
RESOLVED_CONFIG_NAME = "resolved_config.toml"

TRAIN_MODES = ("joint", "adversarial")
ACTION_SUBSETS = ("all", "noise", "blur", "isp")
ARCHITECTURES = ("sfim", "sfim_no_freq", "plain")


@dataclass
class SynthConfig:
    """Synthetic infrared scene generation"""
    count: int = 200
    size: int = 64
    targets_per_image: Tuple[int, int] = (1, 3)
    target_radius: Tuple[float, float] = (1.5, 4.0)
    target_contrast: Tuple[float, float] = (0.1, 0.4)
    clutter_scale: float = 0.15
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.count < 0:
            raise ConfigError(f"synth.count must be >= 0, got {self.count}")
        if self.size <= 0 or self.size % 8:
            raise ConfigError(f"synth.size must be a positive multiple of 8, got {self.size}")
        lo, hi = self.targets_per_image
        if lo < 1 or hi < lo:
            raise ConfigError(f"synth.targets_per_image must satisfy 1 <= min <= max, got {self.targets_per_image}")
        r_lo, r_hi = self.target_radius
        if r_lo <= 0 or r_hi < r_lo:
            raise ConfigError(f"synth.target_radius must satisfy 0 < min <= max, got {self.target_radius}")
        c_lo, c_hi = self.target_contrast
        if c_lo <= 0 or c_hi < c_lo:
            raise ConfigError(f"synth.target_contrast must satisfy 0 < min <= max, got {self.target_contrast}")
        if self.clutter_scale < 0:
            raise ConfigError("synth.clutter_scale must be >= 0")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("synth.test_fraction must lie in [0, 1)")


@dataclass
class TrainConfig:
    """Bi-level training recipe"""
    lr_d: float = 5e-4
    lr_s: float = 1e-4
    lam: float = 1.0
    batch_size: int = 8
    steps: int = 2000
    crop: int = 64
    mode: str = "adversarial"
    seed: int = 0
    baseline_decay: float = 0.9
    use_baseline: bool = True
    action_subset: str = "all"
    arch: str = "sfim"
    eval_every: int = 200
    log_every: int = 50
    workers: int = 1

    def validate(self) -> None:
        if self.lr_d <= 0 or self.lr_s <= 0:
            raise ConfigError("train.lr_d and train.lr_s must be > 0")
        if self.lam < 0:
            raise ConfigError("train.lambda must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        if self.crop < 32 or self.crop % 8:
            raise ConfigError(f"train.crop must be a multiple of 8 and >= 32, got {self.crop}")
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"train.mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ConfigError("train.baseline_decay must lie in [0, 1)")
        if self.action_subset not in ACTION_SUBSETS:
            raise ConfigError(f"train.action_subset must be one of {ACTION_SUBSETS}, got {self.action_subset!r}")
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"train.arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if self.eval_every < 0 or self.log_every < 1:
            raise ConfigError("train.eval_every must be >= 0 and train.log_every >= 1")
        if self.workers < 1:
            raise ConfigError("train.workers must be >= 1")


@dataclass
class TargetMatchConfig:
    """Target-level matching rule for Pd/Fa"""
    binarize_threshold: float = 0.5
    match_distance: float = 3.0
    connectivity: int = 8

    def validate(self) -> None:
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigError("match.binarize_threshold must lie in (0, 1)")
        if self.match_distance <= 0:
            raise ConfigError("match.match_distance must be > 0")
        if self.connectivity != 8:
            raise ConfigError("match.connectivity only supports 8")


@dataclass
class OutputConfig:
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    """Everything a CLI verb needs, resolved from file, environment and flags"""
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    match: TargetMatchConfig = field(default_factory=TargetMatchConfig)
    corruption: Dict[str, list] = field(default_factory=dict)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        self.synth.validate()
        self.train.validate()
        self.match.validate()

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        # "lambda" is the public key; the attribute avoids the keyword
        data["train"]["lambda"] = data["train"].pop("lam")
        for key in ("targets_per_image", "target_radius", "target_contrast"):
            data["synth"][key] = list(data["synth"][key])
        return data


_SECTIONS = {
    "synth": SynthConfig,
    "train": TrainConfig,
    "match": TargetMatchConfig,
    "output": OutputConfig,
}
_KEY_ALIASES = {"train": {"lambda": "lam"}}


def _build_section(name: str, cls, table: Dict[str, Any]):
    aliases = _KEY_ALIASES.get(name, {})
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in table.items():
        attr = aliases.get(key, key)
        if attr not in known:
            raise ConfigError(f"unknown key '{key}' in [{name}]")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[attr] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid [{name}] section: {e}") from e


def parse_run_config(data: Dict[str, Any]) -> RunConfig:
    """Build a RunConfig from a parsed TOML document, rejecting unknown keys"""
    unknown = set(data) - set(_SECTIONS) - {"corruption"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    sections = {name: _build_section(name, cls, data.get(name, {})) for name, cls in _SECTIONS.items()}
    corruption = data.get("corruption", {})
    if not isinstance(corruption, dict):
        raise ConfigError("[corruption] must be a table of kind = [level1, level2, level3]")
    return RunConfig(corruption=dict(corruption), **sections)


class ConfigManager:
    """Loads, resolves and records the run configuration"""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self._config: RunConfig = self._load_config()

    def _load_config(self) -> RunConfig:
        if self.path is None:
            config = RunConfig()
        else:
            try:
                with open(self.path, "rb") as f:
                    data = tomllib.load(f)
            except FileNotFoundError as e:
                raise ConfigError(f"config file not found: {self.path}") from e
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"cannot parse {self.path}: {e}") from e
            config = parse_run_config(data)

        env_seed = os.getenv(SEED_ENV_VAR)
        if env_seed:
            try:
                seed = int(env_seed)
            except ValueError as e:
                raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from e
            config.synth.seed = seed
            config.train.seed = seed

        config.validate()
        return config

    @property
    def config(self) -> RunConfig:
        return self._config

    def override_train(self, **values) -> None:
        """Apply command-line flags (flag wins over env and file); None means not given"""
        for key, value in values.items():
            if value is not None:
                setattr(self._config.train, key, value)
        if values.get("seed") is not None:
            self._config.synth.seed = values["seed"]
        self._config.validate()

    def get_status(self) -> Dict[str, Any]:
        """Get configuration summary for logging"""
        train = self._config.train
        return {
            "source": str(self.path) if self.path else "defaults",
            "mode": train.mode,
            "seed": train.seed,
            "steps": train.steps,
            "arch": train.arch,
            "action_subset": train.action_subset,
        }

    def write_resolved(self, out_dir: Union[str, Path],
                       corruption_table: Optional[Dict[str, list]] = None) -> Path:
        """Write the fully resolved configuration next to the run outputs"""
        data = self._config.to_dict()
        if corruption_table is not None:
            data["corruption"] = {k: list(v) for k, v in corruption_table.items()}
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / RESOLVED_CONFIG_NAME
        with open(path, "wb") as f:
            tomli_w.dump(data, f)
        return path
