"""Loss stack: cross-entropy, logit pairing, attention pairing, combined.

The combined objective is ``ce + alpha * alp + beta * at`` where

* ``alp`` pulls the logit vectors of a clean image and its adversarial
  counterpart together (batch-mean squared L2 distance),
* ``at`` pulls their spatial attention maps together: per tapped group, both
  maps are vectorized, each divided by its own L2 norm, and the p-norm of
  the difference is summed over the configured groups and averaged over the
  batch.

Attention maps collapse the channel axis of an activation tensor:
``map[b, h, w] = sum_c |act[b, c, h, w]| ** power``.

Every loss here comes with a hand-derived gradient so the trainer can push
gradients through both the clean and the adversarial branch of the model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ConfigurationError, InputError

if TYPE_CHECKING:
    from .backbone import GroupedConvNet
    from .dataio import ImageBatch

# below this L2 norm an attention map counts as dead (see PairingConfig docs)
NORM_FLOOR = 1e-12

CE_TARGETS = ("adversarial_only", "clean_only", "both_averaged")


@dataclass(frozen=True)
class PairingConfig:
    """Weights and knobs of the combined objective.

    ``attention_layers`` selects which of the four group taps enter the
    attention term; the default pairs the first three and leaves out the
    coarsest tap, whose few-pixel maps destabilize small-model training when
    paired. ``ce_target`` picks which branch feeds cross-entropy; training on
    the attacked branch only is the default. Dead attention maps (L2 norm
    under ``NORM_FLOOR``) are normalized against the floor instead, and a
    pair that is dead on both sides contributes zero.
    """

    alpha: float = 0.5
    beta: float = 2.0
    attention_layers: tuple[int, ...] = (0, 1, 2)
    attention_power: int = 2
    norm_p: int = 2
    ce_target: str = "adversarial_only"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be non-negative")
        if self.beta > 0 and len(self.attention_layers) == 0:
            raise ConfigurationError("attention_layers must be non-empty when beta > 0")
        if any(j not in (0, 1, 2, 3) for j in self.attention_layers):
            raise ConfigurationError(
                f"attention_layers must be group indices 0..3, got {self.attention_layers}"
            )
        if self.attention_power < 1:
            raise ConfigurationError("attention_power must be a positive integer")
        if self.norm_p < 1:
            raise ConfigurationError("norm_p must be a positive integer")
        if self.ce_target not in CE_TARGETS:
            raise ConfigurationError(
                f"ce_target must be one of {CE_TARGETS}, got {self.ce_target!r}"
            )


@dataclass
class LossBreakdown:
    total: float
    ce: float
    alp: float
    at: float


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its logit gradient ``(softmax - onehot) / B``."""
    z = np.asarray(logits, dtype=np.float64)
    b = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    exp = np.exp(z - zmax)
    sumexp = exp.sum(axis=1, keepdims=True)
    logprobs = z - zmax - np.log(sumexp)
    loss = float(-logprobs[np.arange(b), labels].mean())
    d = exp / sumexp
    d[np.arange(b), labels] -= 1.0
    return loss, d / b


def attention_map(activations: np.ndarray, power: int) -> np.ndarray:
    """Collapse channels to a spatial map: ``sum_c |act| ** power``, shape (B, H, W)."""
    if power < 1:
        raise ConfigurationError("power must be a positive integer")
    a = np.asarray(activations)
    if a.ndim != 4:
        raise InputError(f"expected activations of shape (B, C, H, W), got {a.shape}")
    return (np.abs(a) ** power).sum(axis=1)


def _attention_map_backward(activations: np.ndarray, power: int, d_map: np.ndarray) -> np.ndarray:
    a = np.asarray(activations, dtype=np.float64)
    if power == 1:
        inner = np.sign(a)
    elif power == 2:
        inner = 2.0 * a
    else:
        inner = power * np.sign(a) * np.abs(a) ** (power - 1)
    return inner * d_map[:, None, :, :]


def _pnorm(r: np.ndarray, p: int) -> float:
    if p == 2:
        return float(np.sqrt((r * r).sum()))
    return float((np.abs(r) ** p).sum() ** (1.0 / p))


def _pnorm_grad(r: np.ndarray, p: int, norm: float) -> np.ndarray:
    # zero at r == 0: the loss sits at its minimum there
    if norm == 0.0:
        return np.zeros_like(r)
    if p == 2:
        return r / norm
    return np.sign(r) * np.abs(r) ** (p - 1) / norm ** (p - 1)


def _check_pair_shapes(clean_acts: Sequence[np.ndarray], adv_acts: Sequence[np.ndarray]) -> None:
    if len(clean_acts) != len(adv_acts):
        raise InputError("clean and adversarial activation lists differ in length")
    for j, (c, a) in enumerate(zip(clean_acts, adv_acts)):
        if c.shape != a.shape:
            raise InputError(f"group {j} activation shapes differ: {c.shape} vs {a.shape}")


def at_loss(
    clean_acts: Sequence[np.ndarray],
    adv_acts: Sequence[np.ndarray],
    config: PairingConfig,
) -> float:
    """Attention pairing loss over the configured groups, batch-averaged."""
    value, _, _ = _at_loss_impl(clean_acts, adv_acts, config, want_grads=False)
    return value


def _at_loss_impl(
    clean_acts: Sequence[np.ndarray],
    adv_acts: Sequence[np.ndarray],
    config: PairingConfig,
    want_grads: bool,
):
    _check_pair_shapes(clean_acts, adv_acts)
    for j in config.attention_layers:
        if j >= len(clean_acts):
            raise InputError(f"attention layer {j} out of range for {len(clean_acts)} taps")
    d_clean = [None] * len(clean_acts) if want_grads else None
    d_adv = [None] * len(adv_acts) if want_grads else None
    total = 0.0
    for j in config.attention_layers:
        ca = np.asarray(clean_acts[j], dtype=np.float64)
        aa = np.asarray(adv_acts[j], dtype=np.float64)
        b = ca.shape[0]
        qc = attention_map(ca, config.attention_power).reshape(b, -1)
        qa = attention_map(aa, config.attention_power).reshape(b, -1)
        nc = np.sqrt((qc * qc).sum(axis=1))
        na = np.sqrt((qa * qa).sum(axis=1))
        layer_sum = 0.0
        if want_grads:
            d_qc = np.zeros_like(qc)
            d_qa = np.zeros_like(qa)
        for i in range(b):
            if nc[i] < NORM_FLOOR and na[i] < NORM_FLOOR:
                continue  # both maps dead: no disagreement, no gradient
            dc = max(nc[i], NORM_FLOOR)
            da = max(na[i], NORM_FLOOR)
            v = qc[i] / dc
            u = qa[i] / da
            r = u - v
            dist = _pnorm(r, config.norm_p)
            layer_sum += dist
            if want_grads:
                g = _pnorm_grad(r, config.norm_p, dist)
                if na[i] > NORM_FLOOR:
                    d_qa[i] = (g - u * (u @ g)) / da
                else:
                    d_qa[i] = g / da
                if nc[i] > NORM_FLOOR:
                    d_qc[i] = (-g + v * (v @ g)) / dc
                else:
                    d_qc[i] = -g / dc
        total += layer_sum / b
        if want_grads:
            hw = clean_acts[j].shape[2:]
            d_clean[j] = _attention_map_backward(
                ca, config.attention_power, (d_qc / b).reshape(b, *hw)
            )
            d_adv[j] = _attention_map_backward(
                aa, config.attention_power, (d_qa / b).reshape(b, *hw)
            )
    return float(total), d_clean, d_adv


def alp_loss(clean_logits: np.ndarray, adv_logits: np.ndarray) -> float:
    """Batch-mean squared L2 distance between paired logit vectors."""
    zc = np.asarray(clean_logits, dtype=np.float64)
    za = np.asarray(adv_logits, dtype=np.float64)
    if zc.shape != za.shape:
        raise InputError(f"logit shapes differ: {zc.shape} vs {za.shape}")
    diff = zc - za
    return float((diff * diff).sum(axis=1).mean())


def _alp_grads(clean_logits: np.ndarray, adv_logits: np.ndarray):
    zc = np.asarray(clean_logits, dtype=np.float64)
    za = np.asarray(adv_logits, dtype=np.float64)
    diff = zc - za
    b = zc.shape[0]
    return 2.0 * diff / b, -2.0 * diff / b


@dataclass
class CombinedLossGrads:
    breakdown: LossBreakdown
    param_grads: dict[str, np.ndarray]
    d_clean_pixels: np.ndarray
    d_adv_pixels: np.ndarray
    clean_logits: np.ndarray
    adv_logits: np.ndarray


def _ce_and_grads(clean_fr, adv_fr, labels, ce_target):
    if ce_target == "adversarial_only":
        ce, d_adv = softmax_cross_entropy(adv_fr.logits, labels)
        return ce, None, d_adv
    if ce_target == "clean_only":
        ce, d_clean = softmax_cross_entropy(clean_fr.logits, labels)
        return ce, d_clean, None
    ce_c, d_clean = softmax_cross_entropy(clean_fr.logits, labels)
    ce_a, d_adv = softmax_cross_entropy(adv_fr.logits, labels)
    return 0.5 * (ce_c + ce_a), 0.5 * d_clean, 0.5 * d_adv


def _validate_pair(clean: "ImageBatch", adv: "ImageBatch") -> None:
    if clean.pixels.shape != adv.pixels.shape:
        raise InputError("clean/adversarial pixel shapes differ")
    if not np.array_equal(clean.labels, adv.labels):
        raise InputError("clean/adversarial labels differ; pairs must share labels")


def combined_loss(
    model: "GroupedConvNet",
    clean: "ImageBatch",
    adv: "ImageBatch",
    config: PairingConfig,
) -> LossBreakdown:
    """Evaluate ``ce + alpha * alp + beta * at`` on a clean/adversarial pair."""
    _validate_pair(clean, adv)
    clean_fr = model.forward(clean)
    adv_fr = model.forward(adv)
    ce, _, _ = _ce_and_grads(clean_fr, adv_fr, clean.labels, config.ce_target)
    alp = alp_loss(clean_fr.logits, adv_fr.logits)
    at = at_loss(clean_fr.group_activations, adv_fr.group_activations, config)
    total = ce + config.alpha * alp + config.beta * at
    return LossBreakdown(total=total, ce=ce, alp=alp, at=at)


def combined_loss_with_grads(
    model: "GroupedConvNet",
    clean: "ImageBatch",
    adv: "ImageBatch",
    config: PairingConfig,
) -> CombinedLossGrads:
    """Combined loss plus gradients w.r.t. parameters and both pixel branches.

    Gradients flow through both the clean and the adversarial forward pass
    into the shared parameters; neither branch is detached.
    """
    _validate_pair(clean, adv)
    clean_fr, clean_cache = model.forward_with_cache(clean)
    adv_fr, adv_cache = model.forward_with_cache(adv)

    ce, d_zc, d_za = _ce_and_grads(clean_fr, adv_fr, clean.labels, config.ce_target)
    d_zc = np.zeros_like(clean_fr.logits, dtype=np.float64) if d_zc is None else d_zc
    d_za = np.zeros_like(adv_fr.logits, dtype=np.float64) if d_za is None else d_za

    alp = alp_loss(clean_fr.logits, adv_fr.logits)
    if config.alpha > 0:
        g_zc, g_za = _alp_grads(clean_fr.logits, adv_fr.logits)
        d_zc = d_zc + config.alpha * g_zc
        d_za = d_za + config.alpha * g_za

    d_acts_clean = None
    d_acts_adv = None
    if config.beta > 0:
        at, d_acts_clean, d_acts_adv = _at_loss_impl(
            clean_fr.group_activations, adv_fr.group_activations, config, want_grads=True
        )
        d_acts_clean = [None if d is None else config.beta * d for d in d_acts_clean]
        d_acts_adv = [None if d is None else config.beta * d for d in d_acts_adv]
    else:
        at = at_loss(clean_fr.group_activations, adv_fr.group_activations, config)

    d_adv_pixels, grads_adv = model.backward(adv_cache, d_za, d_acts_adv)
    d_clean_pixels, grads_clean = model.backward(clean_cache, d_zc, d_acts_clean)
    param_grads = {k: grads_adv[k] + grads_clean[k] for k in grads_adv}

    total = ce + config.alpha * alp + config.beta * at
    return CombinedLossGrads(
        breakdown=LossBreakdown(total=total, ce=ce, alp=alp, at=at),
        param_grads=param_grads,
        d_clean_pixels=d_clean_pixels,
        d_adv_pixels=d_adv_pixels,
        clean_logits=clean_fr.logits,
        adv_logits=adv_fr.logits,
    )
