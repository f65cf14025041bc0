"""Datasets, region masks, checkpoints, reports, and run configuration.

Built-in dataset ``blobs2``: a two-class synthetic set of 32x32 grayscale
images where the class is the horizontal position of a bright Gaussian blob
(left vs right). Its discriminative key region is known by construction, so
every image carries a ground-truth mask (the blob's bounding box). Folder
datasets use the layout ``root/split/class_name/*`` with optional masks under
``root/split/masks/<stem>.png`` (nonzero pixels mark the key region).

Checkpoints use a small deterministic container (JSON header + raw array
bytes) so that save -> load -> save is byte-identical; numpy's zip-based
formats embed timestamps and cannot give that guarantee. All writers go
through an atomic temp-file-plus-rename path.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CheckpointError, ConfigurationError, DatasetError, InputError

CHECKPOINT_MAGIC = b"ATPAIRCKPT\n"
CHECKPOINT_VERSION = 1

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff")


# --------------------------------------------------------------------- batches


@dataclass
class ImageBatch:
    """Pixels in [0, 1], shape (B, C, H, W), with integer labels of shape (B,)."""

    pixels: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        self.labels = np.asarray(self.labels)
        if self.pixels.ndim != 4:
            raise InputError(f"pixels must be (B, C, H, W), got shape {self.pixels.shape}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise InputError(
                f"labels shape {self.labels.shape} does not match batch size "
                f"{self.pixels.shape[0]}"
            )
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise InputError("labels must be integers")
        if self.labels.size and self.labels.min() < 0:
            raise InputError("labels must be non-negative")
        lo, hi = float(self.pixels.min(initial=0.0)), float(self.pixels.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise InputError(f"pixel values outside [0, 1]: min={lo}, max={hi}")

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass
class Dataset:
    """In-memory labeled image collection with optional per-image key-region masks."""

    name: str
    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int
    image_ids: list[str]
    masks: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def batches(
        self, batch_size: int, *, shuffle: bool = False, seed: int | None = None
    ) -> Iterator[ImageBatch]:
        """Yield batches; with ``shuffle`` the order is a pure function of ``seed``."""
        n = len(self)
        order = np.arange(n)
        if shuffle:
            if seed is None:
                raise ConfigurationError("shuffled iteration requires a seed")
            order = np.random.default_rng(seed).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            yield ImageBatch(pixels=self.pixels[idx], labels=self.labels[idx])

    def subset(self, n: int) -> "Dataset":
        n = min(n, len(self))
        ids = self.image_ids[:n]
        masks = None
        if self.masks is not None:
            masks = {i: self.masks[i] for i in ids if i in self.masks}
        return Dataset(
            self.name, self.pixels[:n], self.labels[:n], self.num_classes, ids, masks
        )


# ---------------------------------------------------------------- blobs2 data

_BLOBS2_SPLITS = {"train": (1000, 20240801), "test": (200, 20240802)}


def _blobs2(split: str) -> Dataset:
    # Blob contrast and position margin are sized so the class stays
    # separable under any L-inf perturbation up to ~0.2: an attacker can draw
    # a fake blob of height at most background + 2 * eps, far below a dimmed
    # real blob.
    try:
        n, gen_seed = _BLOBS2_SPLITS[split]
    except KeyError:
        raise DatasetError(f"blobs2 has splits {sorted(_BLOBS2_SPLITS)}, not {split!r}")
    rng = np.random.default_rng(gen_seed)
    size = 32
    pixels = np.empty((n, 1, size, size), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    masks: dict[str, np.ndarray] = {}
    ids = [f"{split}_{i:04d}" for i in range(n)]
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(n):
        label = int(rng.integers(0, 2))
        cx_lo, cx_hi = (7.0, 11.0) if label == 0 else (21.0, 25.0)
        cx = rng.uniform(cx_lo, cx_hi)
        cy = rng.uniform(11.0, 21.0)
        sigma = rng.uniform(3.5, 4.5)
        amplitude = rng.uniform(0.90, 0.95)
        background = 0.06 + rng.uniform(0.0, 0.02, size=(size, size))
        blob = amplitude * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
        pixels[i, 0] = np.clip(background + blob, 0.0, 1.0)
        labels[i] = label
        r = int(np.ceil(1.5 * sigma))
        mask = np.zeros((size, size), dtype=bool)
        y0, y1 = max(int(cy) - r, 0), min(int(cy) + r + 1, size)
        x0, x1 = max(int(cx) - r, 0), min(int(cx) + r + 1, size)
        mask[y0:y1, x0:x1] = True
        masks[ids[i]] = mask
    return Dataset("blobs2", pixels, labels, 2, ids, masks)


# --------------------------------------------------------------- folder data


def _load_image_array(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("L", "I;16", "I"):
                arr = np.asarray(img.convert("L"), dtype=np.float64)[None, :, :]
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot read image file {path}: {exc}") from exc
    return arr / 255.0


def _folder_dataset(dataset_id: str, split: str, root_path) -> Dataset:
    root = Path(root_path) / split
    if not root.is_dir():
        raise DatasetError(f"missing dataset split directory: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name != "masks")
    if not class_dirs:
        raise DatasetError(f"no class directories under {root}")
    images, labels, ids = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise DatasetError(f"no image files under {cdir}")
        for p in files:
            arr = _load_image_array(p)
            if p.stem in ids:
                raise DatasetError(f"duplicate image stem across classes: {p.stem}")
            images.append(arr)
            labels.append(label)
            ids.append(p.stem)
    shapes = {a.shape for a in images}
    if len(shapes) != 1:
        raise DatasetError(f"inconsistent image shapes in {root}: {sorted(shapes)}")
    return Dataset(
        dataset_id,
        np.stack(images),
        np.asarray(labels, dtype=np.int64),
        len(class_dirs),
        ids,
        None,
    )


def load_dataset(dataset_id: str, split: str, root_path=None) -> Dataset:
    """Load a dataset by id: the built-in ``blobs2``, or a class-per-directory tree."""
    if dataset_id == "blobs2":
        return _blobs2(split)
    if root_path in (None, ""):
        raise DatasetError(f"dataset {dataset_id!r} requires a root path")
    return _folder_dataset(dataset_id, split, root_path)


def load_masks(dataset_id: str, split: str, root_path=None) -> dict[str, np.ndarray]:
    """Map image id -> boolean key-region mask; every mask must be non-empty."""
    if dataset_id == "blobs2":
        return _blobs2(split).masks
    dataset = _folder_dataset(dataset_id, split, root_path)
    mask_dir = Path(root_path) / split / "masks"
    if not mask_dir.is_dir():
        raise InputError(f"missing mask directory: {mask_dir}")
    _, _, h, w = dataset.pixels.shape
    masks = {}
    for image_id in dataset.image_ids:
        candidates = [p for p in mask_dir.glob(f"{image_id}.*") if p.suffix.lower() in IMAGE_EXTENSIONS]
        if not candidates:
            raise InputError(f"missing mask for image {image_id!r} under {mask_dir}")
        mask = _load_image_array(candidates[0]).sum(axis=0) > 0
        validate_mask(mask, (h, w), image_id)
        masks[image_id] = mask
    return masks


def validate_mask(mask: np.ndarray, image_hw: tuple[int, int], image_id: str = "?") -> None:
    if mask.shape != tuple(image_hw):
        raise InputError(
            f"mask for {image_id!r} has shape {mask.shape}, image is {tuple(image_hw)}"
        )
    if not bool(mask.any()):
        raise InputError(f"mask for {image_id!r} has no positive pixels")


# ---------------------------------------------------------------- checkpoints


def _atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    """Write a text file atomically: readers see the old or the new content, never a mix."""
    _atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(model, path, metadata: dict | None = None) -> None:
    """Serialize a model; identical models produce byte-identical files."""
    names = sorted(model.params)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture_id": model.architecture_id,
        "num_classes": model.num_classes,
        "in_channels": model.in_channels,
        "dtype": model.dtype.name,
        "group_names": list(model.group_names),
        "metadata": metadata or {},
        "arrays": [
            {"name": n, "dtype": model.params[n].dtype.name, "shape": list(model.params[n].shape)}
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack(">Q", len(blob)), blob]
    parts += [np.ascontiguousarray(model.params[n]).tobytes() for n in names]
    _atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path):
    """Rebuild a model from :func:`save_checkpoint` output; parameters are bit-exact."""
    from .backbone import ARCHITECTURES, GroupedConvNet

    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint file not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack(">Q", raw[offset : offset + 8])
    offset += 8
    header = json.loads(raw[offset : offset + hlen].decode("utf-8"))
    offset += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"incompatible checkpoint format_version {header.get('format_version')!r}; "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    arch = header["architecture_id"]
    if arch not in ARCHITECTURES:
        raise CheckpointError(f"checkpoint requires unregistered architecture {arch!r}")
    params = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = dtype.itemsize * count
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype=dtype).reshape(entry["shape"])
        params[entry["name"]] = arr.copy()
        offset += nbytes
    return GroupedConvNet(
        arch,
        int(header["num_classes"]),
        int(header["in_channels"]),
        params,
        np.dtype(header["dtype"]),
    )


# -------------------------------------------------------------------- reports


def save_report(rows: list[dict], path, header: list[str]) -> None:
    """Write CSV rows (dicts) atomically under the given header order."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_cell(row[h]) for h in header))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_image(array: np.ndarray, path) -> None:
    """Save a (H, W) or (C, H, W) array in [0, 1] as an 8-bit lossless PNG."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 3:
        a = a.transpose(1, 2, 0)
        if a.shape[2] == 1:
            a = a[:, :, 0]
    data = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Load one image file as (C, H, W) pixels in [0, 1]."""
    return _load_image_array(Path(path))


# ----------------------------------------------------------------- run config

_SCHEMA: dict[str, tuple[str, object]] = {
    "dataset.id": ("str", "blobs2"),
    "dataset.root": ("str", ""),
    "model.architecture": ("str", "smallcnn4"),
    "model.num_classes": ("int", 2),
    "model.in_channels": ("int", 1),
    "model.seed": ("int", 0),
    "train.epochs": ("int", 12),
    "train.batch_size": ("int", 100),
    "train.learning_rate": ("float", 0.02),
    "train.lr_schedule": ("str", "constant"),
    "train.seed": ("int", 0),
    "train.checkpoint_every": ("int", 0),
    "train.attack.epsilon": ("float", 0.2),
    "train.attack.step_size": ("float", 0.05),
    "train.attack.iterations": ("int", 10),
    "train.attack.random_start": ("bool", True),
    "pairing.alpha": ("float", 0.5),
    "pairing.beta": ("float", 2.0),
    "pairing.attention_layers": ("int_list", [0, 1, 2]),
    "pairing.attention_power": ("int", 2),
    "pairing.norm_p": ("int", 2),
    "pairing.ce_target": ("str", "adversarial_only"),
    "eval.mode": ("str", "gray_box"),
    "eval.checkpoint": ("str", ""),
    "eval.surrogate_checkpoint": ("str", ""),
    "eval.epsilons": ("float_list", [0.25, 0.5]),
    "eval.iterations": ("int_list", [10, 200]),
    "eval.step_size": ("float", 1.0 / 256.0),
    "eval.max_images": ("int", 0),
    "regionstat.group_index": ("int", 0),
    "regionstat.epsilon": ("float", 0.2),
    "regionstat.iterations": ("int", 40),
    "regionstat.step_size": ("float", 0.05),
    "heatmap.epsilon": ("float", 0.25),
    "heatmap.iterations": ("int", 40),
    "heatmap.step_size": ("float", 0.01),
    "output.dir": ("str", "runs/latest"),
}


def default_config() -> dict:
    return {k: (list(v) if isinstance(v, list) else v) for k, (_, v) in _SCHEMA.items()}


def _parse_value(key: str, text: str):
    kind = _SCHEMA[key][0]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind == "int_list":
            return [int(t) for t in text.split(",") if t.strip() != ""]
        if kind == "float_list":
            return [float(t) for t in text.split(",") if t.strip() != ""]
        return text
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {exc}") from exc


def parse_config_text(text: str, config: dict | None = None) -> dict:
    """Parse ``key=value`` lines (# comments allowed) onto defaults; unknown keys fail."""
    config = default_config() if config is None else config
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
        config[key] = _parse_value(key, value)
    return config


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigurationError(f"unknown config key in override: {key!r}")
        config[key] = _parse_value(key, value)
    return config


def resolve_config(config_path=None, overrides: list[str] | None = None) -> dict:
    """Defaults, then the config file, then overrides; validates referenced paths."""
    config = default_config()
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        parse_config_text(path.read_text(), config)
    apply_overrides(config, overrides or [])
    for key in ("dataset.root", "eval.checkpoint", "eval.surrogate_checkpoint"):
        value = config[key]
        if value and not Path(value).exists():
            raise ConfigurationError(f"{key} references a missing path: {value}")
    return config


def render_config(config: dict) -> str:
    lines = []
    for key in sorted(config):
        value = config[key]
        if isinstance(value, list):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"
