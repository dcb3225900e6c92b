"""Dataset ingestion: CIFAR-style binary files and a synthetic generator.

Both sources produce the same handle: float32 image tensors normalized to
zero mean and unit variance per channel using train-split statistics, with
integer labels. The binary layout is one label byte followed by 3072
channel-major pixel bytes per record (3x32x32).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed dataset file or invalid generation spec."""


RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)


@dataclass
class DatasetHandle:
    name: str
    num_classes: int
    channels: int
    height: int
    width: int
    x_train: np.ndarray  # (N, C, H, W) float32, normalized
    y_train: np.ndarray  # (N,) int64
    x_test: np.ndarray
    y_test: np.ndarray
    channel_mean: np.ndarray
    channel_std: np.ndarray
    source: str = ""

    @property
    def train_count(self) -> int:
        return len(self.y_train)

    @property
    def test_count(self) -> int:
        return len(self.y_test)


def _read_records(path: Path, num_classes: int):
    blob = np.fromfile(path, dtype=np.uint8)
    if blob.size == 0 or blob.size % RECORD_BYTES:
        raise DataError(f"{path}: file length {blob.size} is not a multiple of {RECORD_BYTES}")
    records = blob.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) >= num_classes:
        raise DataError(f"{path}: label {labels.max()} >= num_classes {num_classes}")
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE)
    return images, labels


def _stratified_subset(images, labels, size: int, num_classes: int, rng) -> tuple:
    """Pick ~size/num_classes per class (class counts within one of even)."""
    if size >= len(labels):
        return images, labels
    base, extra = divmod(size, num_classes)
    order = rng.permutation(num_classes)
    picks = []
    for rank, cls in enumerate(order):
        want = base + (1 if rank < extra else 0)
        idx = np.flatnonzero(labels == cls)
        if len(idx) < want:
            raise DataError(f"class {cls} has only {len(idx)} samples, need {want} for stratified subset")
        picks.append(rng.choice(idx, size=want, replace=False))
    keep = np.sort(np.concatenate(picks))
    return images[keep], labels[keep]


def _normalize(train_u8, test_u8):
    x_train = train_u8.astype(np.float32) / 255.0
    x_test = test_u8.astype(np.float32) / 255.0
    mean = x_train.mean(axis=(0, 2, 3))
    std = x_train.std(axis=(0, 2, 3))
    std = np.maximum(std, 1e-6)
    x_train = (x_train - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    x_test = (x_test - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return x_train, x_test, mean, std


def load_cifar_binary(train_path, test_path, num_classes: int = 10,
                      subset_train: int = 0, subset_test: int = 0,
                      seed: int = 0, name: str = "cifar") -> DatasetHandle:
    """Load CIFAR-layout binary files, optionally taking stratified subsets."""
    train_path, test_path = Path(train_path), Path(test_path)
    for p in (train_path, test_path):
        if not p.exists():
            raise DataError(f"dataset file not found: {p}")
    train_u8, y_train = _read_records(train_path, num_classes)
    test_u8, y_test = _read_records(test_path, num_classes)
    rng = np.random.default_rng(seed)
    if subset_train:
        train_u8, y_train = _stratified_subset(train_u8, y_train, subset_train, num_classes, rng)
    if subset_test:
        test_u8, y_test = _stratified_subset(test_u8, y_test, subset_test, num_classes, rng)
    x_train, x_test, mean, std = _normalize(train_u8, test_u8)
    return DatasetHandle(
        name=name, num_classes=num_classes, channels=3, height=32, width=32,
        x_train=x_train, y_train=y_train, x_test=x_test, y_test=y_test,
        channel_mean=mean, channel_std=std,
        source=f"cifar_binary({train_path}, {test_path})",
    )


def write_cifar_binary(images_u8: np.ndarray, labels: np.ndarray, path) -> None:
    """Write (N,3,32,32) uint8 images and labels in the binary record layout."""
    if images_u8.shape[1:] != IMAGE_SHAPE:
        raise DataError(f"write_cifar_binary: expected (N, 3, 32, 32), got {images_u8.shape}")
    n = len(labels)
    out = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = images_u8.reshape(n, -1)
    out.tofile(path)


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    per_class_train: int = 500
    per_class_test: int = 100
    channels: int = 3
    image_size: int = 32
    margin: float = 2.0        # amplitude of the class pattern relative to noise
    jitter: int = 0            # max circular shift of the class pattern, pixels
    texture: float = 1.0       # amplitude of smooth per-image texture
    pixel_noise: float = 0.25  # white noise amplitude
    modes: int = 4             # cosine modes per class pattern

    def validate(self):
        if self.num_classes < 2 or self.per_class_train < 1 or self.per_class_test < 1:
            raise DataError("synthetic spec needs >= 2 classes and positive per-class counts")
        if self.image_size < 4 or self.channels < 1:
            raise DataError("synthetic spec has degenerate image geometry")
        return self


def _class_patterns(spec: SyntheticSpec, rng) -> np.ndarray:
    """One low-frequency multi-channel pattern per class, unit RMS."""
    s = spec.image_size
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    patterns = np.zeros((spec.num_classes, spec.channels, s, s), dtype=np.float64)
    for c in range(spec.num_classes):
        for _ in range(spec.modes):
            fy, fx = rng.integers(0, 4, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.5, 1.0)
            wave = amp * np.cos(2 * np.pi * (fy * yy + fx * xx) / s + phase)
            channel_mix = rng.uniform(-1.0, 1.0, size=spec.channels)
            patterns[c] += channel_mix.reshape(-1, 1, 1) * wave
        rms = np.sqrt((patterns[c] ** 2).mean())
        patterns[c] /= max(rms, 1e-9)
    return patterns


def _smooth_noise(rng, shape, size: int) -> np.ndarray:
    """Low-pass filtered Gaussian field (smooth texture), unit-ish scale."""
    field = rng.standard_normal(shape)
    spectrum = np.fft.rfft2(field, axes=(-2, -1))
    fy = np.fft.fftfreq(size).reshape(-1, 1)
    fx = np.fft.rfftfreq(size).reshape(1, -1)
    lowpass = np.exp(-((fy ** 2 + fx ** 2) * (size / 4.0) ** 2))
    smooth = np.fft.irfft2(spectrum * lowpass, s=(size, size), axes=(-2, -1))
    rms = np.sqrt((smooth ** 2).mean(axis=(-2, -1), keepdims=True))
    return smooth / np.maximum(rms, 1e-9)


def _render_split(spec: SyntheticSpec, patterns, per_class: int, rng):
    s = spec.image_size
    n = per_class * spec.num_classes
    labels = np.repeat(np.arange(spec.num_classes), per_class).astype(np.int64)
    signal = patterns[labels] * spec.margin
    if spec.jitter:
        shifts = rng.integers(-spec.jitter, spec.jitter + 1, size=(n, 2))
        for i in range(n):
            signal[i] = np.roll(signal[i], shifts[i], axis=(1, 2))
    texture = spec.texture * _smooth_noise(rng, (n, spec.channels, s, s), s)
    white = spec.pixel_noise * rng.standard_normal((n, spec.channels, s, s))
    raw = signal + texture + white
    u8 = np.clip(128.0 + 32.0 * raw, 0, 255).astype(np.uint8)
    perm = rng.permutation(n)
    return u8[perm], labels[perm]


def generate_synthetic(spec: SyntheticSpec, seed: int = 0, name: str = "synthetic") -> DatasetHandle:
    """Class-conditional textured images with low-frequency class patterns."""
    spec.validate()
    rng = np.random.default_rng(seed)
    patterns = _class_patterns(spec, rng)
    train_u8, y_train = _render_split(spec, patterns, spec.per_class_train, rng)
    test_u8, y_test = _render_split(spec, patterns, spec.per_class_test, rng)
    x_train, x_test, mean, std = _normalize(train_u8, test_u8)
    return DatasetHandle(
        name=name, num_classes=spec.num_classes, channels=spec.channels,
        height=spec.image_size, width=spec.image_size,
        x_train=x_train, y_train=y_train, x_test=x_test, y_test=y_test,
        channel_mean=mean, channel_std=std,
        source=f"synthetic(seed={seed}, margin={spec.margin})",
    )


def synthetic_uint8(spec: SyntheticSpec, seed: int = 0):
    """Raw uint8 splits in binary-file order (for writing CIFAR-layout files)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    patterns = _class_patterns(spec, rng)
    train = _render_split(spec, patterns, spec.per_class_train, rng)
    test = _render_split(spec, patterns, spec.per_class_test, rng)
    return train, test


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop with reflection-free zero padding plus horizontal flip."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def batches(x: np.ndarray, y: np.ndarray, batch_size: int, rng=None,
            augment: bool = False, aug_rng=None):
    """Yield (x, y) minibatches; shuffles when an rng is given."""
    n = len(y)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        xb = x[idx]
        if augment and aug_rng is not None:
            xb = augment_batch(xb, aug_rng)
        yield xb, y[idx]
