"""Robustness evaluation: accuracy sweeps, key-region statistics, heatmaps.

Two threat modes. Gray-box attacks the defended model directly (the attacker
knows the architecture and the defense algorithm, though not the trained
parameters); black-box generates adversarial examples on an independently
trained surrogate of a different architecture and transfers them to the
defended model, which is never queried during generation.

The key-region statistic measures how much of an attention map's mass falls
inside an annotated discriminative region, relative to the region's share of
the image: 1.0 means the map is spread uniformly, values above 1 mean it
concentrates on the region. Constant maps (including all-zero, dead groups)
score exactly 1.0 by definition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig, pgd_attack
from .dataio import Dataset, save_image, save_report, validate_mask
from .errors import ConfigurationError, InputError
from .pairing import attention_map

REPORT_HEADER = ["mode", "epsilon", "iterations", "top1", "n"]


@dataclass
class ThreatModel:
    mode: str
    surrogate: object | None = None

    def __post_init__(self):
        if self.mode not in ("gray_box", "black_box"):
            raise ConfigurationError(f"mode must be gray_box or black_box, got {self.mode!r}")
        if self.mode == "black_box" and self.surrogate is None:
            raise ConfigurationError("black_box evaluation requires a surrogate model")


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def save(self, path) -> None:
        save_report(self.rows, path, REPORT_HEADER)

    def accuracy(self, epsilon: float, iterations: int) -> float:
        for row in self.rows:
            if row["epsilon"] == epsilon and row["iterations"] == iterations:
                return row["top1"]
        raise KeyError((epsilon, iterations))


def clean_accuracy(model, testset: Dataset, batch_size: int = 100) -> float:
    correct = 0
    for batch in testset.batches(batch_size):
        logits = model.forward(batch).logits
        correct += int((logits.argmax(axis=1) == batch.labels).sum())
    return correct / len(testset)


def evaluate_robustness(
    defended,
    threat: ThreatModel,
    testset: Dataset,
    epsilons: list[float],
    iteration_counts: list[int],
    step_size: float,
    *,
    batch_size: int = 100,
    seed: int = 0,
) -> EvalReport:
    """Top-1 accuracy of the defended model per (epsilon, iterations) cell.

    The evaluation attack is deterministic (no random start), so identical
    inputs produce byte-identical reports. Cells are assembled in sorted
    (mode, epsilon, iterations) order.
    """
    if threat.mode == "black_box":
        if threat.surrogate is None:
            raise ConfigurationError("black_box evaluation requires a surrogate model")
        if threat.surrogate.architecture_id == defended.architecture_id:
            raise ConfigurationError(
                "black_box surrogate must be architecturally distinct from the defended model"
            )
        attacked = threat.surrogate
    else:
        attacked = defended

    rows = []
    for eps in sorted(set(float(e) for e in epsilons)):
        for iters in sorted(set(int(i) for i in iteration_counts)):
            correct = 0
            n = 0
            for batch in testset.batches(batch_size):
                if eps == 0.0 or iters == 0:
                    adv = batch  # the feasible set is {x}: the attack is an exact no-op
                else:
                    config = AttackConfig(
                        epsilon=eps, step_size=step_size, num_iterations=iters, random_start=False
                    )
                    adv = pgd_attack(attacked, batch, config)
                logits = defended.forward(adv).logits
                correct += int((logits.argmax(axis=1) == batch.labels).sum())
                n += len(batch)
            rows.append(
                {
                    "mode": threat.mode,
                    "epsilon": eps,
                    "iterations": iters,
                    "top1": correct / n,
                    "n": n,
                }
            )
    metadata = {
        "model": defended.architecture_id,
        "step_size": step_size,
        "seed": seed,
        "n_examples": len(testset),
    }
    return EvalReport(rows=rows, metadata=metadata)


# ------------------------------------------------------------------ attention


def bilinear_upsample(map2d: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize a 2-D map with bilinear interpolation (half-pixel centers).

    Uses the lerp form ``a + t * (b - a)`` so constant maps stay exactly
    constant.
    """
    m = np.asarray(map2d, dtype=np.float64)
    in_h, in_w = m.shape
    out_h, out_w = out_hw
    if (in_h, in_w) == (out_h, out_w):
        return m.copy()
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    ty = ys - y0
    tx = xs - x0
    y0c = np.clip(y0, 0, in_h - 1)
    y1c = np.clip(y0 + 1, 0, in_h - 1)
    x0c = np.clip(x0, 0, in_w - 1)
    x1c = np.clip(x0 + 1, 0, in_w - 1)
    top = m[np.ix_(y0c, x0c)] + tx[None, :] * (m[np.ix_(y0c, x1c)] - m[np.ix_(y0c, x0c)])
    bot = m[np.ix_(y1c, x0c)] + tx[None, :] * (m[np.ix_(y1c, x1c)] - m[np.ix_(y1c, x0c)])
    return top + ty[:, None] * (bot - top)


def region_concentration(map2d: np.ndarray, mask: np.ndarray) -> float:
    """Mass share of the map inside the mask, divided by the mask's area share.

    The map is upsampled to the mask's resolution and normalized to sum 1.
    Constant maps (no concentration anywhere, or fully dead) score exactly 1.
    """
    mask = np.asarray(mask, dtype=bool)
    validate_mask(mask, mask.shape)
    up = bilinear_upsample(map2d, mask.shape)
    if float(up.max()) == float(up.min()):
        return 1.0
    total = float(up.sum())
    if total <= 0:
        raise InputError("attention map has non-constant values but non-positive sum")
    inside = float(up[mask].sum())
    area_fraction = mask.sum() / mask.size
    return (inside / total) / area_fraction


def key_region_activation(
    model,
    testset: Dataset,
    attack: AttackConfig,
    group_index: int,
    *,
    power: int = 2,
    batch_size: int = 100,
) -> float:
    """Mean key-region concentration of one group's attention maps under attack."""
    if group_index not in (0, 1, 2, 3):
        raise ConfigurationError(f"group_index must be 0..3, got {group_index}")
    if testset.masks is None:
        raise InputError("dataset has no key-region masks")
    for image_id in testset.image_ids:
        if image_id not in testset.masks:
            raise InputError(f"missing key-region mask for image {image_id!r}")
    from .dataio import ImageBatch

    scores = []
    n = len(testset)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        batch = ImageBatch(pixels=testset.pixels[start:stop], labels=testset.labels[start:stop])
        adv = pgd_attack(model, batch, attack)
        acts = model.forward(adv).group_activations[group_index]
        maps = attention_map(acts, power)
        for i in range(stop - start):
            mask = testset.masks[testset.image_ids[start + i]]
            scores.append(region_concentration(maps[i], mask))
    return float(np.mean(scores))


# ------------------------------------------------------------------- heatmaps


def export_attention_heatmaps(
    model,
    image: np.ndarray,
    attack: AttackConfig,
    out_dir,
    *,
    label: int | None = None,
    power: int = 2,
) -> list[Path]:
    """Write 8 heatmap PNGs: per group, for the clean image and its attacked twin.

    Maps are upsampled to the input resolution and min-max normalized for
    display; a constant map renders as uniform mid-gray. Without a label the
    attack targets the model's own prediction on the clean image.
    """
    from .dataio import ImageBatch

    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise InputError(f"expected a single (C, H, W) image, got shape {image.shape}")
    h, w = image.shape[1], image.shape[2]
    clean_fr = model.forward(ImageBatch(pixels=image[None], labels=np.zeros(1, dtype=np.int64)))
    if label is None:
        label = int(clean_fr.logits.argmax(axis=1)[0])
    batch = ImageBatch(pixels=image[None], labels=np.asarray([label], dtype=np.int64))
    adv = pgd_attack(model, batch, attack)
    adv_fr = model.forward(adv)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for tag, fr in (("clean", clean_fr), ("adv", adv_fr)):
        for j, acts in enumerate(fr.group_activations):
            up = bilinear_upsample(attention_map(acts, power)[0], (h, w))
            lo, hi = float(up.min()), float(up.max())
            display = np.full_like(up, 0.5) if hi == lo else (up - lo) / (hi - lo)
            path = out_dir / f"{tag}_group{j}.png"
            save_image(display, path)
            paths.append(path)
    return paths
