"""Robust-training loop: attack each batch, pair the branches, descend.

Every step regenerates adversarial counterparts against the current
parameters, evaluates the combined objective on the (clean, adversarial)
pair, and applies one SGD-with-momentum update. Runs are reproducible: all
randomness (epoch shuffling, attack random starts) derives from the config
seed, so identical configs give identical parameter trajectories on the same
platform.

``train_variants`` produces the ablation family used throughout evaluation:
plain cross-entropy, adversarial training alone, each pairing term alone,
and the full combined defense, all under identical budgets.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig, pgd_attack
from .backbone import build_model
from .dataio import Dataset, atomic_write_text, save_checkpoint, save_report
from .errors import ConfigurationError, TrainingDivergedError
from .pairing import PairingConfig, combined_loss_with_grads

MOMENTUM = 0.9
LOG_HEADER = ["step", "epoch", "ce", "alp", "at", "total", "clean_acc"]
VARIANT_NAMES = ("plain", "pgd_at", "alp_only", "at_only", "at_alp")


def _default_train_attack() -> AttackConfig:
    # 10 iterations, random start, step 2.5 * eps / iterations
    return AttackConfig(epsilon=0.2, step_size=0.05, num_iterations=10, random_start=True)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 100
    learning_rate: float = 0.02
    lr_schedule: str = "constant"
    train_attack: AttackConfig = field(default_factory=_default_train_attack)
    pairing: PairingConfig = field(default_factory=PairingConfig)
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "step_decay"):
            raise ConfigurationError(
                f"lr_schedule must be 'constant' or 'step_decay', got {self.lr_schedule!r}"
            )


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def write(self, path) -> None:
        save_report(self.rows, path, LOG_HEADER)

    def epoch_mean(self, epoch: int, column: str) -> float:
        values = [r[column] for r in self.rows if r["epoch"] == epoch]
        return float(np.mean(values))


def epoch_order_seeds(seed: int, epochs: int) -> list[int]:
    """Per-epoch shuffle seeds derived from the run seed (shared with tests)."""
    rng = np.random.default_rng(seed).spawn(2)[0]
    return [int(rng.integers(2**63)) for _ in range(epochs)]


def effective_lr(config: TrainConfig, epoch: int) -> float:
    if config.lr_schedule == "constant":
        return config.learning_rate
    milestones = (math.ceil(config.epochs / 2) + 1, math.ceil(3 * config.epochs / 4) + 1)
    passed = sum(1 for m in milestones if epoch >= m)
    return config.learning_rate * (0.1**passed)


def _config_lines(config: TrainConfig) -> str:
    a, p = config.train_attack, config.pairing
    pairs = [
        ("train.epochs", config.epochs),
        ("train.batch_size", config.batch_size),
        ("train.learning_rate", config.learning_rate),
        ("train.lr_schedule", config.lr_schedule),
        ("train.seed", config.seed),
        ("train.checkpoint_every", config.checkpoint_every),
        ("train.attack.epsilon", a.epsilon),
        ("train.attack.step_size", a.step_size),
        ("train.attack.iterations", a.num_iterations),
        ("train.attack.random_start", str(a.random_start).lower()),
        ("pairing.alpha", p.alpha),
        ("pairing.beta", p.beta),
        ("pairing.attention_layers", ",".join(str(j) for j in p.attention_layers)),
        ("pairing.attention_power", p.attention_power),
        ("pairing.norm_p", p.norm_p),
        ("pairing.ce_target", p.ce_target),
    ]
    return "\n".join(f"{k}={v}" for k, v in pairs) + "\n"


def train(model, dataset: Dataset, config: TrainConfig, out_dir=None):
    """Train in place; returns ``(model, TrainingLog)``.

    With ``out_dir`` set, writes per-epoch checkpoints on the
    ``checkpoint_every`` schedule, a ``final.ckpt``, the training log CSV,
    and an echo of the config. Aborts on the first non-finite loss.
    """
    attack_rng = np.random.default_rng(config.seed).spawn(2)[1]
    shuffle_seeds = epoch_order_seeds(config.seed, config.epochs)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    log = TrainingLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out_dir / "train_config.cfg", _config_lines(config))

    step = 0
    for epoch in range(1, config.epochs + 1):
        lr = effective_lr(config, epoch)
        for batch in dataset.batches(
            config.batch_size, shuffle=True, seed=shuffle_seeds[epoch - 1]
        ):
            adv = pgd_attack(model, batch, config.train_attack, rng=attack_rng)
            out = combined_loss_with_grads(model, batch, adv, config.pairing)
            b = out.breakdown
            if not math.isfinite(b.total):
                raise TrainingDivergedError(step, b.ce, b.alp, b.at, b.total)
            for k in model.params:
                velocity[k] *= MOMENTUM
                velocity[k] += out.param_grads[k]
                model.params[k] -= lr * velocity[k]
            clean_acc = float((out.clean_logits.argmax(axis=1) == batch.labels).mean())
            log.rows.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "ce": b.ce,
                    "alp": b.alp,
                    "at": b.at,
                    "total": b.total,
                    "clean_acc": clean_acc,
                }
            )
            step += 1
        if out_dir is not None and config.checkpoint_every > 0 and epoch % config.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"checkpoint_epoch_{epoch:03d}.ckpt")
    if out_dir is not None:
        save_checkpoint(model, out_dir / "final.ckpt")
        log.write(out_dir / "training_log.csv")
    return model, log


def variant_config(base: TrainConfig, name: str) -> TrainConfig:
    """Derive one ablation member; only (alpha, beta, epsilon) ever change."""
    attack, pairing = base.train_attack, base.pairing
    if name == "plain":
        # epsilon 0 makes the attack an exact no-op; skipping its iterations
        # changes nothing but wall time
        attack = dataclasses.replace(attack, epsilon=0.0, num_iterations=0)
        pairing = dataclasses.replace(pairing, alpha=0.0, beta=0.0)
    elif name == "pgd_at":
        pairing = dataclasses.replace(pairing, alpha=0.0, beta=0.0)
    elif name == "alp_only":
        pairing = dataclasses.replace(pairing, beta=0.0)
    elif name == "at_only":
        pairing = dataclasses.replace(pairing, alpha=0.0)
    elif name != "at_alp":
        raise ConfigurationError(f"unknown variant {name!r}; choose from {VARIANT_NAMES}")
    return dataclasses.replace(base, train_attack=attack, pairing=pairing)


def train_variants(
    dataset: Dataset,
    base: TrainConfig,
    out_dir,
    *,
    architecture_id: str = "smallcnn4",
    model_seed: int | None = None,
    variants: tuple[str, ...] = VARIANT_NAMES,
) -> dict[str, Path]:
    """Train the ablation family with identical budgets; returns checkpoint paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = base.seed if model_seed is None else model_seed
    paths: dict[str, Path] = {}
    for name in variants:
        model = build_model(
            architecture_id,
            dataset.num_classes,
            seed,
            in_channels=dataset.pixels.shape[1],
        )
        config = variant_config(base, name)
        run_dir = out_dir / name
        train(model, dataset, config, out_dir=run_dir)
        paths[name] = run_dir / "final.ckpt"
    return paths
