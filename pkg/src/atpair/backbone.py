"""Grouped convolutional classifier with activation taps and manual backprop.

The model is four convolutional groups (3x3 conv, per-channel affine, ReLU,
2x2 average pool) followed by global average pooling and a linear head. The
output of every group is "tapped": the forward pass returns all four
activation tensors alongside the logits, and the backward pass accepts extra
gradients injected at each tap. That injection is what lets attention-based
losses backpropagate into the trunk without any autograd framework.

Internally activations flow channels-last so each convolution is a single
large GEMM over im2col patches; tapped activations are exposed through the
public (B, C, H, W) contract as transposed views. All parameters live in a
flat ``name -> ndarray`` dict (conv weights shaped (3, 3, C_in, C_out)), so
checkpointing and optimizers stay trivial. Everything is pure numpy and
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigurationError, InputError

if TYPE_CHECKING:
    from .dataio import ImageBatch

GROUP_NAMES = ("group0", "group1", "group2", "group3")

# architecture_id -> per-group channel widths (4 groups each)
ARCHITECTURES: dict[str, tuple[int, ...]] = {
    "smallcnn4": (16, 32, 64, 128),
    # narrower sibling used as the independently trained transfer surrogate
    "smallcnn4slim": (8, 16, 32, 64),
}


@dataclass
class ForwardResult:
    """Raw pre-softmax logits plus the four tapped group activations (B, C, H, W)."""

    logits: np.ndarray
    group_activations: list[np.ndarray] = field(default_factory=list)


def _im2col(x: np.ndarray) -> np.ndarray:
    # channels-last (B, H, W, C) -> (B*H*W, 9*C) patches of a 3x3 same conv
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1 : h + 1, 1 : w + 1, :] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # window view is (B, H, W, C, 3, 3); order patch dims as (3, 3, C)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(b * h * w, 9 * c)


def _col2im(dcols: np.ndarray, x_shape: tuple[int, ...]) -> np.ndarray:
    # adjoint of _im2col: (B*H*W, 9*C) -> (B, H, W, C)
    b, h, w, c = x_shape
    d6 = dcols.reshape(b, h, w, 3, 3, c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki : ki + h, kj : kj + w, :] += d6[:, :, :, ki, kj, :]
    return dxp[:, 1 : h + 1, 1 : w + 1, :]


def _avgpool2(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    return x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _avgpool2_back(dy: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2) * 0.25


class GroupedConvNet:
    """ModelHandle: named parameters, four group taps, manual gradients.

    Evaluation-mode only: the forward pass has no stochastic layers and no
    batch statistics, so outputs are a deterministic function of parameters
    and input. Parameter mutation (the trainer's job) must be serialized
    against concurrent forward/backward callers.
    """

    def __init__(
        self,
        architecture_id: str,
        num_classes: int,
        in_channels: int,
        params: dict[str, np.ndarray],
        dtype: np.dtype,
    ):
        if architecture_id not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {architecture_id!r}")
        self.architecture_id = architecture_id
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.group_names = GROUP_NAMES
        self.widths = ARCHITECTURES[architecture_id]
        self.params = params
        self.dtype = np.dtype(dtype)

    # ---------------------------------------------------------------- forward

    def _validate_pixels(self, pixels: np.ndarray) -> None:
        if pixels.ndim != 4 or pixels.shape[1] != self.in_channels:
            raise InputError(
                f"expected pixels of shape (B, {self.in_channels}, H, W), "
                f"got {pixels.shape}"
            )
        h, w = pixels.shape[2], pixels.shape[3]
        if h % 16 != 0 or w % 16 != 0 or h == 0 or w == 0:
            raise InputError(
                f"spatial size {h}x{w} not divisible by 16 (four 2x2 pools)"
            )

    def _run_group(self, j: int, x: np.ndarray, cache: list | None) -> np.ndarray:
        # x, output: channels-last (B, H, W, C)
        p = self.params
        g = self.group_names[j]
        b, h, w = x.shape[0], x.shape[1], x.shape[2]
        cols = _im2col(x)
        wmat = p[f"{g}.conv_weight"].reshape(-1, self.widths[j])
        conv = (cols @ wmat).reshape(b, h, w, self.widths[j])
        affine = conv * p[f"{g}.scale"] + p[f"{g}.shift"]
        relu = np.maximum(affine, 0)
        out = _avgpool2(relu)
        if cache is not None:
            cache.append({"x_shape": x.shape, "cols": cols, "conv": conv, "mask": affine > 0})
        return out

    def _forward(self, pixels: np.ndarray, want_cache: bool):
        self._validate_pixels(pixels)
        x = np.ascontiguousarray(
            np.asarray(pixels, dtype=self.dtype).transpose(0, 2, 3, 1)
        )
        cache: list | None = [] if want_cache else None
        acts = []
        for j in range(4):
            x = self._run_group(j, x, cache)
            acts.append(x.transpose(0, 3, 1, 2))  # public channels-first view
        pooled = x.mean(axis=(1, 2))
        logits = pooled @ self.params["head.weight"].T + self.params["head.bias"]
        result = ForwardResult(logits=logits, group_activations=acts)
        if want_cache:
            return result, {"groups": cache, "pooled": pooled, "act3_shape": x.shape}
        return result

    def forward(self, batch: "ImageBatch") -> ForwardResult:
        """Run the batch through the net; logits plus all four tapped activations."""
        return self._forward(batch.pixels, want_cache=False)

    def forward_with_cache(self, batch: "ImageBatch"):
        """Like :meth:`forward` but also returns the cache `backward` needs."""
        return self._forward(batch.pixels, want_cache=True)

    # --------------------------------------------------------------- backward

    def backward(
        self,
        cache: dict,
        d_logits: np.ndarray,
        d_group_activations: list[np.ndarray | None] | None = None,
        *,
        param_grads: bool = True,
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Backpropagate gradients from the logits and (optionally) the taps.

        ``d_group_activations`` holds one extra (B, C, H, W) gradient per tap
        (or None); each is added to the gradient flowing through that tap,
        which is how losses defined on intermediate activations reach both
        the earlier parameters and the input. Returns ``(d_pixels, grads)``
        with ``grads`` keyed like :attr:`params`; ``param_grads=False`` skips
        the parameter gradients (the attack only needs the input gradient).
        """
        p = self.params
        grads: dict[str, np.ndarray] = {}
        d_logits = np.asarray(d_logits, dtype=self.dtype)

        pooled = cache["pooled"]
        if param_grads:
            grads["head.weight"] = d_logits.T @ pooled
            grads["head.bias"] = d_logits.sum(axis=0)
        d_pooled = d_logits @ p["head.weight"]

        b, h3, w3, c3 = cache["act3_shape"]
        d_act = np.broadcast_to(
            (d_pooled / (h3 * w3))[:, None, None, :], cache["act3_shape"]
        ).copy()

        for j in range(3, -1, -1):
            if d_group_activations is not None and d_group_activations[j] is not None:
                inject = np.asarray(d_group_activations[j], dtype=self.dtype)
                d_act = d_act + inject.transpose(0, 2, 3, 1)
            g = self.group_names[j]
            c = cache["groups"][j]
            d_relu = _avgpool2_back(d_act)
            d_affine = d_relu * c["mask"]
            if param_grads:
                grads[f"{g}.scale"] = (d_affine * c["conv"]).sum(axis=(0, 1, 2))
                grads[f"{g}.shift"] = d_affine.sum(axis=(0, 1, 2))
            d_conv = (d_affine * p[f"{g}.scale"]).reshape(-1, self.widths[j])
            wmat = p[f"{g}.conv_weight"].reshape(-1, self.widths[j])
            if param_grads:
                grads[f"{g}.conv_weight"] = (c["cols"].T @ d_conv).reshape(
                    p[f"{g}.conv_weight"].shape
                )
            d_act = _col2im(d_conv @ wmat.T, c["x_shape"])

        d_pixels = np.ascontiguousarray(d_act.transpose(0, 3, 1, 2))
        return d_pixels, grads

    def input_gradient(self, pixels: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Gradient of mean cross-entropy w.r.t. the input pixels."""
        result, cache = self._forward(pixels, want_cache=True)
        from .pairing import softmax_cross_entropy

        _, d_logits = softmax_cross_entropy(result.logits, labels)
        d_pixels, _ = self.backward(cache, d_logits, param_grads=False)
        return d_pixels

    # ------------------------------------------------------------- tap replay

    def run_group(self, j: int, x: np.ndarray) -> np.ndarray:
        """Recompute the tap of group ``j`` from its (B, C, H, W) input activation."""
        xl = np.ascontiguousarray(np.asarray(x, dtype=self.dtype).transpose(0, 2, 3, 1))
        return self._run_group(j, xl, None).transpose(0, 3, 1, 2)

    def run_head(self, act3: np.ndarray) -> np.ndarray:
        """Recompute logits from the final group's tapped activation."""
        pooled = np.asarray(act3, dtype=self.dtype).mean(axis=(2, 3))
        return pooled @ self.params["head.weight"].T + self.params["head.bias"]

    # ------------------------------------------------------------------ misc

    def copy(self) -> "GroupedConvNet":
        return GroupedConvNet(
            self.architecture_id,
            self.num_classes,
            self.in_channels,
            {k: v.copy() for k, v in self.params.items()},
            self.dtype,
        )


def build_model(
    architecture_id: str,
    num_classes: int,
    seed: int,
    *,
    in_channels: int = 1,
    dtype=np.float32,
) -> GroupedConvNet:
    """Build a registered architecture with seed-determined parameters.

    Identical seeds give bit-identical parameters. He-normal init on conv and
    head weights, identity per-channel affines.
    """
    if architecture_id not in ARCHITECTURES:
        raise ConfigurationError(
            f"unknown architecture {architecture_id!r}; "
            f"registered: {sorted(ARCHITECTURES)}"
        )
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    widths = ARCHITECTURES[architecture_id]
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params: dict[str, np.ndarray] = {}
    c_in = in_channels
    for g, c_out in zip(GROUP_NAMES, widths):
        fan_in = c_in * 9
        params[f"{g}.conv_weight"] = (
            rng.standard_normal((3, 3, c_in, c_out)) * np.sqrt(2.0 / fan_in)
        ).astype(dtype)
        params[f"{g}.scale"] = np.ones(c_out, dtype=dtype)
        params[f"{g}.shift"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    params["head.weight"] = (
        rng.standard_normal((num_classes, widths[-1])) * np.sqrt(2.0 / widths[-1])
    ).astype(dtype)
    params["head.bias"] = np.zeros(num_classes, dtype=dtype)
    return GroupedConvNet(architecture_id, num_classes, in_channels, params, dtype)
