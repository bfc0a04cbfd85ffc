"""Procedural raster datasets and class-incremental task streams.

Classes are sinusoidal gratings that differ only in orientation: class k of a
K-class pool uses angle k*pi/K, with per-sample random phase and mild pixel
noise. That keeps the benchmark small enough for minutes-scale runs while
leaving corruption kernels something real to destroy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .rng import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # [H, W, C] float32 in [0, 1]
    label: int
    poisoned: bool = False


@dataclass
class StreamSpec:
    class_pool_size: int = 8
    task_class_counts: tuple = (4, 2, 2)
    image_side: int = 16
    channels: int = 1
    train_per_class: int = 200
    val_per_class: int = 40
    test_per_class: int = 100
    # per-sample frequency drawn from [grating_cycles, grating_cycles_max];
    # the band spreads corruption sensitivity so severity bites gradually
    grating_cycles: float = 3.5
    grating_cycles_max: float | None = 5.5
    noise_sigma: float = 0.05
    phase_jitter: float = 2.0 * math.pi  # phi ~ U[0, phase_jitter); 0 pins phase
    shuffle_classes: bool = True
    seed: int = 0

    @property
    def val_fraction(self) -> float:
        return self.val_per_class / (self.train_per_class + self.val_per_class)


@dataclass
class TaskDataset:
    task_id: int
    classes: tuple
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)


@dataclass
class ClassPool:
    spec: StreamSpec
    train_pool: dict  # class -> list[Sample], later split into train/val
    test: dict  # class -> list[Sample], never poisoned


def _grating_batch(rng, count, side, channels, theta, cycles_lo, cycles_hi,
                   noise_sigma, phase_jitter):
    ys, xs = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    proj = (xs * math.cos(theta) + ys * math.sin(theta)) / side
    phases = rng.uniform(0.0, phase_jitter, size=count) if phase_jitter > 0 else np.zeros(count)
    if cycles_hi > cycles_lo:
        cycles = rng.uniform(cycles_lo, cycles_hi, size=count)
    else:
        cycles = np.full(count, cycles_lo)
    arg = 2.0 * math.pi * cycles[:, None, None] * proj[None, :, :] + phases[:, None, None]
    base = 0.5 + 0.4 * np.sin(arg)
    imgs = np.repeat(base[:, :, :, None], channels, axis=3)
    if noise_sigma > 0:
        imgs = imgs + rng.normal(0.0, noise_sigma, size=imgs.shape)
    return np.clip(imgs, 0.0, 1.0).astype(np.float32)


def synth_class_pool(spec: StreamSpec) -> ClassPool:
    """Generate the full labeled pool; pure function of (spec, spec.seed)."""
    k = spec.class_pool_size
    if k < 2:
        raise ValueError(f"need at least 2 classes, got {k}")
    if k > 36:
        raise ValueError(f"class pool {k} too large for distinguishable orientations (max 36)")
    if spec.image_side < 8:
        raise ValueError(f"image side must be >= 8, got {spec.image_side}")
    train_pool, test = {}, {}
    n_pool = spec.train_per_class + spec.val_per_class
    cycles_hi = spec.grating_cycles_max if spec.grating_cycles_max else spec.grating_cycles
    if cycles_hi < spec.grating_cycles:
        raise ValueError("grating_cycles_max must be >= grating_cycles")
    for cls in range(k):
        theta = cls * math.pi / k
        for split_name, count, target in (("train", n_pool, train_pool),
                                          ("test", spec.test_per_class, test)):
            rng = stream(spec.seed, "synth", cls, split_name)
            imgs = _grating_batch(rng, count, spec.image_side, spec.channels, theta,
                                  spec.grating_cycles, cycles_hi, spec.noise_sigma,
                                  spec.phase_jitter)
            target[cls] = [Sample(image=imgs[i], label=cls) for i in range(count)]
    return ClassPool(spec=spec, train_pool=train_pool, test=test)


def build_stream(pool: ClassPool, spec: StreamSpec) -> list:
    """Partition a seeded class permutation into disjoint-class tasks."""
    counts = tuple(spec.task_class_counts)
    if sum(counts) > spec.class_pool_size:
        raise ValueError(
            f"task class counts {counts} request {sum(counts)} classes, pool has {spec.class_pool_size}")
    if any(c < 1 for c in counts):
        raise ValueError("every task needs at least one class")
    if spec.shuffle_classes:
        order = [int(c) for c in stream(spec.seed, "class-perm").permutation(spec.class_pool_size)]
    else:
        order = list(range(spec.class_pool_size))
    tasks = []
    cursor = 0
    for task_id, n_classes in enumerate(counts):
        classes = tuple(order[cursor:cursor + n_classes])
        cursor += n_classes
        train = [s for cls in classes for s in pool.train_pool[cls]]
        test = [s for cls in classes for s in pool.test[cls]]
        tasks.append(TaskDataset(task_id=task_id, classes=classes, train=train, val=[], test=test))
    return tasks


def train_val_split(task: TaskDataset, val_fraction: float, seed: int) -> TaskDataset:
    """Stratified split of task.train; runs before any poisoning so an attack
    contaminates both sides."""
    if not 0 < val_fraction < 0.5:
        raise ValueError(f"val_fraction must be in (0, 0.5), got {val_fraction}")
    merged = task.train + task.val
    train, val = [], []
    for cls in task.classes:
        cls_samples = [s for s in merged if s.label == cls]
        n = len(cls_samples)
        if n < 2:
            raise ValueError(f"class {cls} has {n} samples, cannot split")
        n_val = round_half_up(val_fraction * n)
        chosen = set(stream(seed, "split", task.task_id, cls).choice(n, size=n_val, replace=False).tolist())
        val.extend(s for i, s in enumerate(cls_samples) if i in chosen)
        train.extend(s for i, s in enumerate(cls_samples) if i not in chosen)
    return TaskDataset(task_id=task.task_id, classes=task.classes, train=train, val=val,
                       test=task.test)


def make_stream(spec: StreamSpec) -> list:
    """Pool -> tasks -> per-task stratified splits, all keyed by spec.seed."""
    pool = synth_class_pool(spec)
    tasks = build_stream(pool, spec)
    return [train_val_split(t, spec.val_fraction, spec.seed) for t in tasks]


def flatten(samples) -> tuple:
    """Stack samples into (X [N, H*W*C] float32, y [N] int64) for the engine."""
    if not samples:
        raise ValueError("no samples to flatten")
    x = np.stack([s.image.reshape(-1) for s in samples]).astype(np.float32)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


# --- external formats -------------------------------------------------------

def _read_exact(data: bytes, offset: int, count: int, path: str) -> bytes:
    if offset + count > len(data):
        raise FormatError(
            f"{path}: truncated, expected {offset + count} bytes but file has {len(data)}")
    return data[offset:offset + count]


def load_idx_images(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic = int.from_bytes(_read_exact(data, 0, 4, path), "big")
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte 0, expected 0x{IDX_IMAGES_MAGIC:08x}")
    n = int.from_bytes(_read_exact(data, 4, 4, path), "big")
    h = int.from_bytes(_read_exact(data, 8, 4, path), "big")
    w = int.from_bytes(_read_exact(data, 12, 4, path), "big")
    raw = _read_exact(data, 16, n * h * w, path)
    if len(data) != 16 + n * h * w:
        raise FormatError(f"{path}: {len(data) - 16 - n * h * w} trailing bytes after pixel data")
    return (np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w).astype(np.float32) / 255.0)


def load_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic = int.from_bytes(_read_exact(data, 0, 4, path), "big")
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte 0, expected 0x{IDX_LABELS_MAGIC:08x}")
    n = int.from_bytes(_read_exact(data, 4, 4, path), "big")
    raw = _read_exact(data, 8, n, path)
    if len(data) != 8 + n:
        raise FormatError(f"{path}: {len(data) - 8 - n} trailing bytes after label data")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def write_idx_images(path: str, images: np.ndarray) -> None:
    """images: [N, H, W] floats in [0, 1], stored as rounded unsigned bytes."""
    n, h, w = images.shape
    payload = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(IDX_IMAGES_MAGIC.to_bytes(4, "big"))
        fh.write(n.to_bytes(4, "big"))
        fh.write(h.to_bytes(4, "big"))
        fh.write(w.to_bytes(4, "big"))
        fh.write(payload.tobytes())


def write_idx_labels(path: str, labels: np.ndarray) -> None:
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("IDX labels must fit in an unsigned byte")
    with open(path, "wb") as fh:
        fh.write(IDX_LABELS_MAGIC.to_bytes(4, "big"))
        fh.write(int(labels.size).to_bytes(4, "big"))
        fh.write(labels.astype(np.uint8).tobytes())


def _infer_plane(n_values: int, path: str):
    side = int(round(math.sqrt(n_values)))
    if side * side == n_values:
        return side, 1
    if n_values % 3 == 0:
        side = int(round(math.sqrt(n_values // 3)))
        if side * side * 3 == n_values:
            return side, 3
    raise FormatError(f"{path}: cannot infer image shape from {n_values} pixel columns")


def load_csv_pixels(path: str) -> list:
    """CSV rows: label, then G*G*C pixel intensities in [0, 1]."""
    samples = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for row_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
                if width < 2:
                    raise FormatError(f"{path}: row {row_no} has no pixel columns")
                side, channels = _infer_plane(width - 1, path)
            elif len(cells) != width:
                raise FormatError(
                    f"{path}: row {row_no} has {len(cells)} columns, expected {width}")
            try:
                label = int(cells[0])
            except ValueError:
                raise FormatError(f"{path}: row {row_no}: label {cells[0]!r} is not an integer") from None
            if label < 0:
                raise FormatError(f"{path}: row {row_no}: label {label} out of range")
            try:
                pixels = np.array([float(c) for c in cells[1:]], dtype=np.float32)
            except ValueError:
                raise FormatError(f"{path}: row {row_no}: non-numeric pixel value") from None
            if pixels.min() < 0.0 or pixels.max() > 1.0:
                raise FormatError(f"{path}: row {row_no}: pixel intensity outside [0, 1]")
            samples.append(Sample(image=pixels.reshape(side, side, channels), label=label))
    if not samples:
        raise FormatError(f"{path}: no rows")
    return samples


def write_csv_pixels(path: str, samples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            flat = s.image.reshape(-1)
            fh.write(str(s.label) + "," + ",".join(f"{v:.6f}" for v in flat) + "\n")


def _infer_labels_path(path: str) -> str:
    for old, new in (("images", "labels"), ("idx3", "idx1")):
        if old in path:
            path = path.replace(old, new)
    return path


def load_external(path: str, format: str, labels_path: str | None = None) -> list:
    """Load a labeled dataset from disk; format is 'idx' or 'csv'."""
    fmt = format.lower()
    if fmt == "csv":
        return load_csv_pixels(path)
    if fmt != "idx":
        raise ValueError(f"unknown dataset format {format!r} (expected 'idx' or 'csv')")
    if labels_path is None:
        labels_path = _infer_labels_path(path)
        if labels_path == path:
            raise FormatError(f"{path}: cannot infer labels file, pass labels_path")
    images = load_idx_images(path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(
            f"{path}: {len(images)} images but {len(labels)} labels in {labels_path}")
    return [Sample(image=images[i][:, :, None], label=int(labels[i])) for i in range(len(images))]


__all__ = [
    "Sample", "StreamSpec", "TaskDataset", "ClassPool", "synth_class_pool", "build_stream",
    "train_val_split", "make_stream", "flatten", "load_external", "load_idx_images",
    "load_idx_labels", "write_idx_images", "write_idx_labels", "load_csv_pixels",
    "write_csv_pixels", "round_half_up",
]
