"""Synthetic image datasets with a planted spurious correlation.

The class is determined by a "true" feature (shape identity or stripe
orientation) while a "confound" feature (corner patch or background tint)
agrees with the class on a configurable fraction of samples. Because the
features are rendered procedurally, the confound's pixel location is known
exactly, which downstream mask tests rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ShapeError
from .io import load_container, save_container
from .seeding import np_rng

DATASET_MAGIC = "CFXDS1"

TRUE_FEATURES = ("shape", "stripe-orientation")
CONFOUND_FEATURES = ("corner-patch", "background-tint")
SPLITS = ("train", "val", "test")

_BG = 0.15
_TINT_LEVELS = (0.08, 0.32)  # background level for confound state 0 / 1
_PATCH_VALUE = 0.95


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 24
    channels: int = 1
    n_samples: int = 2000
    true_feature: str = "shape"
    confound_feature: str = "corner-patch"
    correlation: float = 0.95
    noise_std: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 8:
            raise ConfigurationError(f"image_size must be >= 8, got {self.image_size}")
        if self.channels not in (1, 3):
            raise ConfigurationError(f"channels must be 1 or 3, got {self.channels}")
        if self.n_samples < 2:
            raise ConfigurationError(f"n_samples must be >= 2, got {self.n_samples}")
        if self.true_feature not in TRUE_FEATURES:
            raise ConfigurationError(
                f"unknown true_feature {self.true_feature!r}; expected one of {TRUE_FEATURES}"
            )
        if self.confound_feature not in CONFOUND_FEATURES:
            raise ConfigurationError(
                f"unknown confound_feature {self.confound_feature!r}; expected one of {CONFOUND_FEATURES}"
            )
        if not 0.0 <= self.correlation <= 1.0:
            raise ConfigurationError(f"correlation must be in [0, 1], got {self.correlation}")
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.true_feature == "shape" and self.confound_feature == "corner-patch":
            # The shape and the patch must not share pixels, otherwise the
            # confound contaminates the class-defining region.
            first_shape_row = math.ceil(_shape_center(self.image_size) - _shape_extent(self.image_size))
            if first_shape_row <= _patch_size(self.image_size):
                raise ConfigurationError(
                    f"image_size {self.image_size} too small to render both features: "
                    "the shape would overlap the corner patch"
                )

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "n_samples": self.n_samples,
            "true_feature": self.true_feature,
            "confound_feature": self.confound_feature,
            "correlation": self.correlation,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigurationError(f"unknown DatasetSpec keys: {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64 in {0, 1}
    confound_flags: np.ndarray  # (N,) bool, True where confound agrees with class
    spec: DatasetSpec
    split: str | None = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.confound_flags = np.ascontiguousarray(self.confound_flags, dtype=bool)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def n_classes(self) -> int:
        return 2

    def subset(self, indices: np.ndarray, split: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            images=self.images[indices].copy(),
            labels=self.labels[indices].copy(),
            confound_flags=self.confound_flags[indices].copy(),
            spec=self.spec,
            split=split if split is not None else self.split,
        )


def _patch_size(image_size: int) -> int:
    return max(2, image_size // 8)


def _shape_center(image_size: int) -> float:
    return (image_size - 1) / 2.0


def _shape_extent(image_size: int) -> float:
    # base radius plus the maximum jitter of 1 px
    return 0.25 * image_size + 1.0


def _stripe_period(image_size: int) -> int:
    return max(4, image_size // 6)


def _disk_mask(size: int, radius: float) -> np.ndarray:
    c = _shape_center(size)
    ii, jj = np.mgrid[0:size, 0:size]
    return (ii - c) ** 2 + (jj - c) ** 2 <= radius**2


def _cross_mask(size: int, radius: float) -> np.ndarray:
    c = _shape_center(size)
    w = max(1.0, 0.08 * size)
    ii, jj = np.mgrid[0:size, 0:size]
    horiz = (np.abs(ii - c) <= w) & (np.abs(jj - c) <= radius)
    vert = (np.abs(jj - c) <= w) & (np.abs(ii - c) <= radius)
    return horiz | vert


def _shape_masks(size: int, jitter: int) -> tuple[np.ndarray, np.ndarray]:
    radius = 0.25 * size + jitter
    return _disk_mask(size, radius), _cross_mask(size, radius)


def _render_sample(spec: DatasetSpec, label: int, confound_state: int, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    if spec.confound_feature == "background-tint":
        bg = _TINT_LEVELS[confound_state]
    else:
        bg = _BG
    canvas = np.full((size, size), bg, dtype=np.float64)

    if spec.true_feature == "shape":
        jitter = int(rng.integers(-1, 2))
        intensity = 0.70 + 0.20 * rng.random()
        disk, cross = _shape_masks(size, jitter)
        canvas[disk if label == 0 else cross] = intensity
    else:  # stripe-orientation
        period = _stripe_period(size)
        phase = int(rng.integers(0, period))
        amp = 0.40 + 0.15 * rng.random()
        idx = np.arange(size)
        wave = ((idx + phase) // (period // 2)) % 2 == 0
        if label == 0:  # horizontal stripes: intensity varies along rows
            canvas[wave, :] = bg + amp
        else:  # vertical stripes
            canvas[:, wave] = bg + amp

    if spec.confound_feature == "corner-patch":
        p = _patch_size(size)
        if confound_state == 1:
            canvas[1 : 1 + p, 1 : 1 + p] = _PATCH_VALUE
        else:
            canvas[size - 1 - p : size - 1, size - 1 - p : size - 1] = _PATCH_VALUE

    img = np.broadcast_to(canvas, (spec.channels, size, size)).copy()
    if spec.noise_std > 0:
        img += rng.normal(0.0, spec.noise_std, img.shape)
    return np.clip(img, 0.0, 1.0)


def synthesize(spec: DatasetSpec) -> LabeledDataset:
    """Generate a dataset with exactly round(correlation * n) confound-agreeing samples."""
    spec.validate()
    rng = np_rng(spec.seed, "dataset")

    n = spec.n_samples
    labels = np.repeat(np.arange(2), [n - n // 2, n // 2])
    labels = labels[rng.permutation(n)]

    n_agree = int(round(spec.correlation * n))
    flags = np.zeros(n, dtype=bool)
    flags[rng.permutation(n)[:n_agree]] = True
    states = np.where(flags, labels, 1 - labels)

    images = np.empty((n, spec.channels, spec.image_size, spec.image_size), dtype=np.float64)
    for i in range(n):
        images[i] = _render_sample(spec, int(labels[i]), int(states[i]), rng)
    return LabeledDataset(images=images, labels=labels, confound_flags=flags, spec=spec)


def infer_label(image: np.ndarray, spec: DatasetSpec) -> int:
    """Re-derive the class from the rendered true feature alone.

    Shape: mean-subtracted matched filter against the disk/cross templates
    over the shape's bounding window (which excludes the confound corners).
    Stripes: compare the variance of row means against column means.
    """
    gray = image.mean(axis=0)
    size = spec.image_size
    if spec.true_feature == "shape":
        c = _shape_center(size)
        e = _shape_extent(size)
        lo = max(0, math.ceil(c - e) - 1)
        hi = min(size, math.floor(c + e) + 2)
        window = gray[lo:hi, lo:hi]
        window = window - window.mean()
        best_score, best_label = -np.inf, 0
        for jitter in (-1, 0, 1):
            disk, cross = _shape_masks(size, jitter)
            for label, mask in ((0, disk), (1, cross)):
                tmpl = mask[lo:hi, lo:hi].astype(np.float64)
                tmpl -= tmpl.mean()
                score = float((window * tmpl).sum()) / math.sqrt(float((tmpl**2).sum()))
                if score > best_score:
                    best_score, best_label = score, label
        return best_label
    margin = _patch_size(size) + 2
    inner = gray[margin : size - margin, margin : size - margin]
    var_rows = float(inner.mean(axis=1).var())
    var_cols = float(inner.mean(axis=0).var())
    return 0 if var_rows > var_cols else 1


def split(ds: LabeledDataset, fractions: tuple[float, float, float]) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Stratified disjoint split into (train, val, test)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ConfigurationError(f"expected 3 fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise ConfigurationError(f"fractions must be >= 0, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must sum to 1, got sum {sum(fractions)!r}")

    rng = np_rng(ds.spec.seed, "split")
    parts: list[list[int]] = [[], [], []]
    for cls in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == cls)
        idx = idx[rng.permutation(idx.size)]
        counts = _largest_remainder(idx.size, fractions)
        start = 0
        for part, count in zip(parts, counts):
            part.extend(idx[start : start + count].tolist())
            start += count
    out = []
    for part, name in zip(parts, SPLITS):
        order = np.sort(np.asarray(part, dtype=np.int64))
        out.append(ds.subset(order, split=name))
    return tuple(out)


def _largest_remainder(n: int, fractions: tuple[float, ...]) -> list[int]:
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    remainders = [r - c for r, c in zip(raw, counts)]
    for _ in range(n - sum(counts)):
        k = max(range(len(fractions)), key=lambda i: (remainders[i], -i))
        counts[k] += 1
        remainders[k] = -1.0
    return counts


def save_dataset(ds: LabeledDataset, path: str | Path) -> None:
    meta = {"spec": ds.spec.to_dict(), "split": ds.split}
    arrays = {
        "images": ds.images,
        "labels": ds.labels,
        "confound_flags": ds.confound_flags,
    }
    save_container(path, DATASET_MAGIC, meta, arrays)


def load_dataset(path: str | Path) -> LabeledDataset:
    meta, arrays = load_container(path, DATASET_MAGIC)
    spec = DatasetSpec.from_dict(meta["spec"])
    return LabeledDataset(
        images=arrays["images"],
        labels=arrays["labels"],
        confound_flags=arrays["confound_flags"],
        spec=spec,
        split=meta["split"],
    )


def export_images(ds: LabeledDataset, out_dir: str | Path, limit: int | None = None) -> list[Path]:
    """Write samples as 8-bit PNG files for visual inspection."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(ds) if limit is None else min(limit, len(ds))
    paths = []
    for i in range(n):
        arr = np.round(ds.images[i] * 255.0).astype(np.uint8)
        img = Image.fromarray(arr[0] if ds.spec.channels == 1 else arr.transpose(1, 2, 0))
        p = out_dir / f"sample_{i:04d}_y{ds.labels[i]}_c{int(ds.confound_flags[i])}.png"
        img.save(p)
        paths.append(p)
    return paths
