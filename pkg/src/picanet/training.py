"""SGD with momentum, step-decay schedule, deterministic batching and the train loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .data import Sample, augment
from .errors import ConfigurationError, NumericalError
from .layers import ENCODER, ParamRegistry
from .network import SaliencyNet, deep_supervised_loss
from .tensor import Tape, Tensor, backward, detect_anomaly


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    encoder_lr_multiplier: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch: int = 8
    max_steps: int = 2000
    decay_factor: float = 0.1
    decay_steps: int = 700
    loss_weights: tuple[float, ...] = (0.5, 0.5, 0.8, 0.8, 1.0)
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        for name in ("base_lr", "encoder_lr_multiplier", "decay_factor"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        # zero momentum / decay are allowed so plain SGD stays expressible
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("momentum and weight_decay must be non-negative")
        if self.batch < 1 or self.decay_steps < 1:
            raise ConfigurationError("batch and decay_steps must be >= 1")
        if self.max_steps < 0:
            raise ConfigurationError("max_steps must be >= 0")
        if any(w <= 0 for w in self.loss_weights):
            raise ConfigurationError("loss weights must be positive")


def lr_at_step(step: int, cfg: TrainConfig, group: str | None = None) -> float:
    """base_lr * decay_factor ** (step // decay_steps), scaled for the encoder group."""
    if step < 0:
        raise ConfigurationError("step must be >= 0")
    lr = cfg.base_lr * cfg.decay_factor ** (step // cfg.decay_steps)
    return lr * cfg.encoder_lr_multiplier if group == ENCODER else lr


def sgd_momentum_step(params, grads, velocity, cfg: TrainConfig, step: int, groups=None):
    """One update per array: v <- mu v + (g + wd p); p <- p - lr v.

    Arrays are updated in place and also returned as ``(params, velocity)``.
    ``groups`` gives each array's lr group (default: full rate).
    """
    groups = groups or [None] * len(params)
    for p, g, v, grp in zip(params, grads, velocity, groups):
        if p.shape != g.shape or p.shape != v.shape:
            raise ConfigurationError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= cfg.momentum
        v += g + cfg.weight_decay * p
        p -= lr_at_step(step, cfg, grp) * v
    return params, velocity


class SGD:
    """Momentum SGD over the trainable tensors of a registry."""

    def __init__(self, registry: ParamRegistry, cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.names = [n for n in registry.names() if registry.is_trainable(n)]
        self.params = [registry[n] for n in self.names]
        self.groups = [registry.group(n) for n in self.names]
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, step: int) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad.astype(p.dtype, copy=False)
                 for p in self.params]
        sgd_momentum_step([p.data for p in self.params], grads, self.velocity, self.cfg, step,
                          self.groups)


def batch_stream(samples: list[Sample], cfg: TrainConfig) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless deterministic stream of (images, masks) batches.

    Each epoch is a fresh permutation; the final partial batch is dropped.
    """
    if len(samples) < cfg.batch:
        raise ConfigurationError(f"dataset of {len(samples)} is smaller than batch {cfg.batch}")
    rng = np.random.default_rng([cfg.seed, 1])
    per_epoch = len(samples) // cfg.batch
    while True:
        order = rng.permutation(len(samples))
        for b in range(per_epoch):
            chosen = [samples[i] for i in order[b * cfg.batch:(b + 1) * cfg.batch]]
            if cfg.augment:
                chosen = [augment(s, rng) for s in chosen]
            yield (np.stack([s.image for s in chosen]), np.stack([s.mask for s in chosen]))


def training_loss(net: SaliencyNet, images: np.ndarray, masks: np.ndarray, cfg: TrainConfig,
                  training: bool = True) -> Tensor:
    result = net.forward(Tensor(images), training=training)
    return deep_supervised_loss(result.side_maps, masks, cfg.loss_weights)


@dataclass
class TrainState:
    step: int = 0
    losses: list[float] = field(default_factory=list)


def train(net: SaliencyNet, samples: list[Sample], cfg: TrainConfig,
          on_step: Callable[[int, float], None] | None = None,
          on_epoch: Callable[[int, int], None] | None = None,
          on_decay: Callable[[int], None] | None = None) -> TrainState:
    """Run ``cfg.max_steps`` SGD steps and return the loss trajectory.

    ``on_epoch(epoch, step)`` fires after each full pass; ``on_decay(step)``
    fires after the last step before every lr decay boundary.  A non-finite
    loss replays the batch with anomaly detection and raises
    :class:`NumericalError` naming the first offending op.
    """
    state = TrainState()
    if cfg.max_steps == 0:
        return state
    opt = SGD(net.registry, cfg)
    stream = batch_stream(samples, cfg)
    per_epoch = len(samples) // cfg.batch
    for step in range(cfg.max_steps):
        images, masks = next(stream)
        net.registry.zero_grad()
        with Tape() as tape:
            loss = training_loss(net, images, masks, cfg)
        value = float(loss.data)
        if not np.isfinite(value):
            tape.reset()
            with detect_anomaly():
                training_loss(net, images, masks, cfg)
            raise NumericalError(f"non-finite loss at step {step}")
        backward(loss, tape)
        opt.step(step)
        state.step = step + 1
        state.losses.append(value)
        if on_step:
            on_step(step, value)
        if on_epoch and (step + 1) % per_epoch == 0:
            on_epoch((step + 1) // per_epoch, step + 1)
        if on_decay and (step + 1) % cfg.decay_steps == 0:
            on_decay(step + 1)
    return state
