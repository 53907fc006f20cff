"""
Strategy generation network and its score-function training machinery.

The network maps a clean image to a categorical distribution over the 30
(kind, severity) corruption actions. Rewards are the detector's per-sample
losses on the realised corruption and are constants with respect to the
policy weights, so the gradient is the REINFORCE estimator

    (1/N) * sum_i (reward_i - baseline) * grad log p(s_i | x_i)

followed by plain gradient ascent.
"""
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from corruptions import NUM_ACTIONS, CorruptionAction
from errors import PolicyError


@dataclass(frozen=True)
class StrategyNetConfig:
    conv_blocks: int = 5
    base_channels: int = 16
    num_actions: int = NUM_ACTIONS
    in_channels: int = 1

    @property
    def min_size(self) -> int:
        return 2 ** self.conv_blocks


@dataclass(frozen=True)
class ActionDistribution:
    """Categorical distribution over actions for one sample"""
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise PolicyError(f"expected a 1-D probability vector, got shape {p.shape}")
        if np.isnan(p).any():
            raise PolicyError("action distribution contains NaN probabilities")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
            raise PolicyError(f"invalid action distribution (min={p.min():.3g}, sum={p.sum():.8f})")
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return self.probs.size


@dataclass
class RewardRecord:
    action_index: int
    log_prob: float
    reward: float = 0.0


class ConvBlock(nn.Sequential):
    """3×3 convolution -> group norm -> ReLU -> 2× max-pool"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1, bias=False),
            nn.GroupNorm(min(8, out_channels), out_channels),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )


class StrategyNet(nn.Module):
    """Five convolution blocks, global average pooling, one fully-connected head"""

    def __init__(self, config: StrategyNetConfig = StrategyNetConfig()):
        super().__init__()
        if config.conv_blocks != 5:
            raise PolicyError(f"the strategy network uses exactly 5 conv blocks, got {config.conv_blocks}")
        self.config = config
        channels = [config.in_channels] + [config.base_channels * 2 ** i for i in range(config.conv_blocks)]
        self.blocks = nn.ModuleList(ConvBlock(c_in, c_out) for c_in, c_out in zip(channels[:-1], channels[1:]))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(channels[-1], config.num_actions)
        self.zero_head_()

    def zero_head_(self) -> "StrategyNet":
        """Zero the head so the policy starts exactly uniform"""
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
        return self

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != self.config.in_channels:
            raise PolicyError(f"expected a (B, {self.config.in_channels}, H, W) batch, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if min(h, w) < self.config.min_size:
            raise PolicyError(f"strategy network needs H, W >= {self.config.min_size}, got {h}×{w}")
        x = images
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise PolicyError(f"non-finite activations after conv block {i + 1}")
        logits = self.head(self.pool(x).flatten(1))
        if not torch.isfinite(logits).all():
            raise PolicyError("non-finite activations in the fully-connected head")
        return logits


class LinearPolicy(nn.Module):
    """Single linear layer on flattened pixels; small enough to enumerate exactly"""

    def __init__(self, in_features: int, num_actions: int):
        super().__init__()
        self.head = nn.Linear(in_features, num_actions)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(images.flatten(1))


def action_mask(allowed: Optional[Sequence[int]], num_actions: int = NUM_ACTIONS) -> Optional[torch.Tensor]:
    """Boolean mask over actions, or None for the unrestricted space"""
    if allowed is None:
        return None
    mask = torch.zeros(num_actions, dtype=torch.bool)
    mask[list(allowed)] = True
    if not mask.any():
        raise PolicyError("action restriction leaves no allowed action")
    return mask


def policy_logits(policy: nn.Module, images: torch.Tensor,
                  mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    logits = policy(images)
    if mask is not None:
        logits = logits.masked_fill(~mask.to(logits.device), float("-inf"))
    return logits


def policy_forward(policy: nn.Module, images: torch.Tensor,
                   mask: Optional[torch.Tensor] = None) -> List[ActionDistribution]:
    """One action distribution per image"""
    with torch.no_grad():
        probs = F.softmax(policy_logits(policy, images, mask).double(), dim=1)
    return [ActionDistribution(row.cpu().numpy()) for row in probs]


def sample_index(dist: ActionDistribution, seed: int) -> Tuple[int, float]:
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    p = dist.probs / dist.probs.sum()
    index = int(rng.choice(p.size, p=p))
    return index, math.log(p[index])


def sample_action(dist: ActionDistribution, seed: int) -> Tuple[CorruptionAction, float]:
    """Draw one corruption action; deterministic given ``seed``"""
    if len(dist) != NUM_ACTIONS:
        raise PolicyError(f"expected a distribution over {NUM_ACTIONS} actions, got {len(dist)}")
    index, log_prob = sample_index(dist, seed)
    return CorruptionAction.from_index(index), log_prob


def expected_objective(dist: ActionDistribution, rewards: Sequence[float]) -> float:
    """sum_k rewards[k] * probs[k] for one sample"""
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape != dist.probs.shape:
        raise PolicyError(f"reward vector length {r.size} does not match {len(dist)} actions")
    if not np.isfinite(r).all():
        raise PolicyError("rewards must be finite")
    return float(np.dot(r, dist.probs))


def reinforce_gradient(policy: nn.Module, images: torch.Tensor, records: Sequence[RewardRecord],
                       baseline: float = 0.0,
                       mask: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
    """Monte-Carlo score-function gradient of the expected reward, keyed by parameter name"""
    if len(records) != images.shape[0]:
        raise PolicyError(f"{len(records)} reward records for {images.shape[0]} images")
    if not math.isfinite(baseline):
        raise PolicyError("baseline must be finite")
    rewards = torch.tensor([r.reward for r in records], dtype=torch.float64)
    if not torch.isfinite(rewards).all():
        raise PolicyError("non-finite reward in batch")
    actions = torch.tensor([r.action_index for r in records], dtype=torch.long)

    named = [(name, p) for name, p in policy.named_parameters() if p.requires_grad]
    log_probs = F.log_softmax(policy_logits(policy, images, mask), dim=1)
    chosen = log_probs.gather(1, actions.unsqueeze(1).to(log_probs.device)).squeeze(1)
    advantage = (rewards - baseline).to(chosen.dtype).to(chosen.device)
    surrogate = (advantage * chosen).mean()
    grads = torch.autograd.grad(surrogate, [p for _, p in named], allow_unused=True)

    result = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not torch.isfinite(g).all():
            raise PolicyError(f"non-finite policy gradient for {name}")
        result[name] = g
    return result


def strategy_step(policy: nn.Module, gradient: Dict[str, torch.Tensor], lr_s: float) -> nn.Module:
    """Gradient ascent: theta <- theta + lr_s * grad"""
    if lr_s <= 0:
        raise PolicyError(f"lr_s must be > 0, got {lr_s}")
    for name, g in gradient.items():
        if not torch.isfinite(g).all():
            raise PolicyError(f"non-finite gradient for {name}")
    with torch.no_grad():
        for name, p in policy.named_parameters():
            if name in gradient:
                p.add_(gradient[name], alpha=lr_s)
    return policy


class RewardBaseline:
    """Exponential moving average of batch-mean rewards"""

    def __init__(self, decay: float = 0.9, enabled: bool = True):
        self.decay = decay
        self.enabled = enabled
        self.value: Optional[float] = None

    def current(self, rewards: Sequence[float]) -> float:
        """Baseline to subtract for this batch"""
        if not self.enabled:
            return 0.0
        if self.value is None:
            return float(np.mean(rewards))
        return self.value

    def update(self, rewards: Sequence[float]) -> float:
        mean = float(np.mean(rewards))
        if self.value is None:
            self.value = mean
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * mean
        return self.value

    def state_dict(self) -> Dict[str, Optional[float]]:
        return {"decay": self.decay, "enabled": self.enabled, "value": self.value}

    def load_state_dict(self, state: Dict[str, Optional[float]]) -> None:
        self.decay = state["decay"]
        self.enabled = state["enabled"]
        self.value = state["value"]
