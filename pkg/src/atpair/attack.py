"""L-infinity projected gradient descent attack.

The attack maximizes the attacked model's cross-entropy at a data point over
the intersection of the epsilon ball around the clean image and the valid
pixel range. Each iteration ascends by ``step_size * sign(grad)``, projects
back onto the epsilon ball, then clips to [0, 1]. Only cross-entropy drives
the ascent; pairing losses never reach the attacker.

All ball/clip arithmetic runs in float64 regardless of the model's dtype, so
the constraint holds to within a few ulp even after hundreds of iterations.
``sign`` maps exactly-zero gradient components to zero (no step).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigurationError

# headline benchmark protocol: eps in {64/256, 128/256}, step 1/256, 10..200 iters
DEFAULT_EPSILON = 64.0 / 256.0
DEFAULT_STEP_SIZE = 1.0 / 256.0


@dataclass(frozen=True)
class AttackConfig:
    """Budget of an untargeted L-infinity PGD attack (pixel scale 0..1)."""

    epsilon: float = DEFAULT_EPSILON
    step_size: float = DEFAULT_STEP_SIZE
    num_iterations: int = 10
    random_start: bool = False
    targeted: bool = False

    def __post_init__(self):
        _validate(self)


def _validate(config: AttackConfig) -> None:
    if not 0.0 <= config.epsilon <= 1.0:
        raise ConfigurationError(f"epsilon must be in [0, 1], got {config.epsilon}")
    if config.step_size <= 0:
        raise ConfigurationError(f"step_size must be positive, got {config.step_size}")
    if config.num_iterations < 0:
        raise ConfigurationError("num_iterations must be non-negative")
    if config.targeted:
        raise ConfigurationError("targeted attacks are out of scope; targeted must be False")


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto the epsilon ball around ``x`` intersected with [0, 1]."""
    lo = np.maximum(x - epsilon, 0.0)
    hi = np.minimum(x + epsilon, 1.0)
    return np.minimum(np.maximum(x_adv, lo), hi)


def pgd_attack(model, batch, config: AttackConfig, rng: np.random.Generator | None = None):
    """Attack a batch; returns a new batch with perturbed pixels, same labels.

    ``rng`` seeds the uniform random start and must be supplied when
    ``config.random_start`` is set, so parallel callers stay reproducible.
    The model is only read, never mutated.
    """
    from .dataio import ImageBatch

    _validate(config)
    x = np.asarray(batch.pixels, dtype=np.float64)
    labels = batch.labels
    if config.random_start:
        if rng is None:
            raise ConfigurationError("random_start requires an explicit rng")
        x_adv = project(x + rng.uniform(-config.epsilon, config.epsilon, size=x.shape), x, config.epsilon)
    else:
        x_adv = x.copy()
    for _ in range(config.num_iterations):
        grad = model.input_gradient(x_adv, labels)
        x_adv = x_adv + config.step_size * np.sign(grad).astype(np.float64)
        x_adv = project(x_adv, x, config.epsilon)
    return ImageBatch(pixels=x_adv, labels=labels.copy())


def attack_sweep(
    model,
    batch_stream: Iterable,
    epsilons: list[float],
    iteration_counts: list[int],
    step_size: float,
) -> dict[tuple[float, int], list]:
    """Attack every batch once per (epsilon, iterations) cell; deterministic."""
    batches = list(batch_stream)
    out: dict[tuple[float, int], list] = {}
    for eps in epsilons:
        for iters in iteration_counts:
            config = AttackConfig(
                epsilon=eps, step_size=step_size, num_iterations=iters, random_start=False
            )
            out[(eps, iters)] = [pgd_attack(model, b, config) for b in batches]
    return out


def accuracy(model, batch) -> float:
    """Top-1 accuracy of the model on one batch."""
    logits = model.forward(batch).logits
    return float((logits.argmax(axis=1) == batch.labels).mean())
