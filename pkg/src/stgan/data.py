"""Dataset containers, IDX file I/O, stratified splits and synthetic fixtures.

Images are stored as float32 arrays of shape (n, H, W) with intensities in
[-1, 1]. Every example carries a stable integer id; ids are what the
self-training bookkeeping tracks, so they must stay unique within a pool.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised when a file does not start with the expected IDX magic."""


class IdxConsistencyError(ValueError):
    """Raised when image and label files disagree on the record count."""


class InfeasibleSplitError(ValueError):
    """Raised when a class has fewer examples than the split requires."""


@dataclass(frozen=True)
class SplitSpec:
    """How many labelled examples to keep per class, and with which seed."""

    count_per_class: int
    seed: int

    def __post_init__(self):
        if self.count_per_class < 0:
            raise ValueError("count_per_class must be >= 0")


@dataclass
class Dataset:
    """A collection of single-channel images with optional labels.

    ``labels`` is None for unlabelled data. ``shadow_labels`` holds the true
    labels of examples whose labels were stripped; it exists purely for
    pseudo-label accuracy metrics and must never feed training.
    """

    images: np.ndarray  # (n, H, W) float32 in [-1, 1]
    ids: np.ndarray  # (n,) int64, unique
    num_classes: int
    labels: np.ndarray | None = None
    shadow_labels: np.ndarray | None = None
    source: str = "real"  # "real" | "generated"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.images.ndim != 3:
            raise ValueError(f"images must be (n, H, W), got {self.images.shape}")
        n = len(self.images)
        if len(self.ids) != n:
            raise ValueError("ids and images must align 1:1")
        if len(np.unique(self.ids)) != n:
            raise ValueError("ids must be unique within a dataset")
        if n and (self.images.min() < -1.0 or self.images.max() > 1.0):
            raise ValueError("image intensities must lie in [-1, 1]")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for name in ("labels", "shadow_labels"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.int64)
            setattr(self, name, arr)
            if len(arr) != n:
                raise ValueError(f"{name} must align 1:1 with images")
            if n and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise ValueError(f"{name} must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(
            images=self.images[indices],
            ids=self.ids[indices],
            num_classes=self.num_classes,
            labels=None if self.labels is None else self.labels[indices],
            shadow_labels=None
            if self.shadow_labels is None
            else self.shadow_labels[indices],
            source=self.source,
        )

    def without_labels(self, keep_shadow: bool = True) -> "Dataset":
        """Strip labels, optionally retaining them in the shadow store."""
        shadow = self.labels if keep_shadow else None
        return replace(self, labels=None, shadow_labels=shadow)

    def with_labels(self, labels) -> "Dataset":
        return replace(self, labels=np.asarray(labels, dtype=np.int64))

    def with_fresh_ids(self, start: int) -> "Dataset":
        return replace(self, ids=np.arange(start, start + len(self), dtype=np.int64))

    def shadow_map(self) -> dict[int, int]:
        """id -> true label, for the metrics layer only."""
        if self.shadow_labels is None:
            return {}
        return {int(i): int(l) for i, l in zip(self.ids, self.shadow_labels)}


def concat(datasets) -> Dataset:
    """Concatenate datasets; ids must stay globally unique."""
    datasets = [d for d in datasets if len(d)]
    if not datasets:
        raise ValueError("nothing to concatenate")
    k = datasets[0].num_classes
    if any(d.num_classes != k for d in datasets):
        raise ValueError("num_classes mismatch")
    has_labels = all(d.labels is not None for d in datasets)
    has_shadow = all(d.shadow_labels is not None for d in datasets)
    return Dataset(
        images=np.concatenate([d.images for d in datasets]),
        ids=np.concatenate([d.ids for d in datasets]),
        num_classes=k,
        labels=np.concatenate([d.labels for d in datasets]) if has_labels else None,
        shadow_labels=np.concatenate([d.shadow_labels for d in datasets])
        if has_shadow
        else None,
        source=datasets[0].source if len({d.source for d in datasets}) == 1 else "real",
    )


def _read_be32(f, path):
    data = f.read(4)
    if len(data) != 4:
        raise IdxFormatError(f"{path}: truncated header")
    return struct.unpack(">I", data)[0]


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load an IDX image/label file pair into a labelled Dataset.

    Raw bytes in [0, 255] are mapped linearly onto [-1, 1].
    """
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        n = _read_be32(f, images_path)
        rows = _read_be32(f, images_path)
        cols = _read_be32(f, images_path)
        payload = f.read(n * rows * cols)
        if len(payload) != n * rows * cols:
            raise IdxFormatError(f"{images_path}: truncated pixel payload")
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)

    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        n_labels = _read_be32(f, labels_path)
        payload = f.read(n_labels)
        if len(payload) != n_labels:
            raise IdxFormatError(f"{labels_path}: truncated label payload")
        labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)

    if n_labels != n:
        raise IdxConsistencyError(
            f"{images_path} holds {n} images but {labels_path} holds {n_labels} labels"
        )

    images = raw.astype(np.float32) / 127.5 - 1.0
    return Dataset(
        images=images,
        ids=np.arange(n, dtype=np.int64),
        num_classes=num_classes,
        labels=labels,
    )


def save_idx(dataset: Dataset, images_path, labels_path):
    """Write a dataset as an IDX image/label file pair (inverse of load_idx)."""
    raw = np.clip((dataset.images + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    n, rows, cols = raw.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(raw.tobytes())
    if dataset.labels is None:
        raise ValueError("cannot write a label file for an unlabelled dataset")
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def pad_images(dataset: Dataset, size: int = 32) -> Dataset:
    """Zero-pad (black border, intensity -1) images up to size x size."""
    n, h, w = dataset.images.shape
    if h > size or w > size:
        raise ValueError(f"cannot pad {h}x{w} images down to {size}x{size}")
    if h == size and w == size:
        return dataset
    top = (size - h) // 2
    left = (size - w) // 2
    out = np.full((n, size, size), -1.0, dtype=np.float32)
    out[:, top : top + h, left : left + w] = dataset.images
    return replace(dataset, images=out)


def stratified_split(d: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Split into a small labelled set and the unlabelled remainder.

    Picks exactly ``count_per_class`` examples of each class by seeded uniform
    sampling without replacement. The remainder has its labels stripped into
    the shadow store.
    """
    if d.labels is None:
        raise ValueError("stratified_split needs a labelled dataset")
    rng = np.random.default_rng(spec.seed)
    chosen = []
    for cls in range(d.num_classes):
        cls_idx = np.flatnonzero(d.labels == cls)
        if len(cls_idx) < spec.count_per_class:
            raise InfeasibleSplitError(
                f"class {cls} has {len(cls_idx)} examples, "
                f"need {spec.count_per_class}"
            )
        chosen.append(rng.choice(cls_idx, size=spec.count_per_class, replace=False))
    chosen = np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=int)
    mask = np.zeros(len(d), dtype=bool)
    mask[chosen.astype(int)] = True
    labelled = d.subset(np.flatnonzero(mask))
    unlabelled = d.subset(np.flatnonzero(~mask)).without_labels(keep_shadow=True)
    return labelled, unlabelled


def take_subset(d: Dataset, n: int, seed: int) -> Dataset:
    """Seeded uniform subsample of n examples without replacement."""
    if n >= len(d):
        return d
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(d), size=n, replace=False))
    return d.subset(idx)


def synthetic_blobs(
    n_per_class: int,
    K: int,
    separation: float,
    seed: int,
    image_size: int = 8,
) -> Dataset:
    """K isotropic Gaussian clusters embedded in image-shaped arrays.

    A quick deterministic fixture: each class is a cluster around a random
    direction scaled by ``separation``, squashed into [-1, 1] with tanh.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if K < 2:
        raise ValueError("K must be >= 2")
    if separation <= 0:
        raise ValueError("separation must be > 0")
    rng = np.random.default_rng(seed)
    dim = image_size * image_size
    centers = rng.normal(size=(K, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    images, labels = [], []
    for cls in range(K):
        pts = centers[cls] + rng.normal(scale=0.5, size=(n_per_class, dim))
        images.append(pts)
        labels.extend([cls] * n_per_class)
    images = np.tanh(np.concatenate(images)).reshape(-1, image_size, image_size)
    return Dataset(
        images=images.astype(np.float32),
        ids=np.arange(len(images), dtype=np.int64),
        num_classes=K,
        labels=np.asarray(labels, dtype=np.int64),
    )


# Seven-segment layouts for the synthetic digit fixture. Segments are named
# a..g; endpoints live on a unit square with y pointing down.
_SEGMENTS = {
    "a": ((0.22, 0.15), (0.78, 0.15)),
    "b": ((0.78, 0.15), (0.78, 0.50)),
    "c": ((0.78, 0.50), (0.78, 0.85)),
    "d": ((0.22, 0.85), (0.78, 0.85)),
    "e": ((0.22, 0.50), (0.22, 0.85)),
    "f": ((0.22, 0.15), (0.22, 0.50)),
    "g": ((0.22, 0.50), (0.78, 0.50)),
}

_DIGIT_SEGMENTS = {
    0: "abcdef",
    1: "bc",
    2: "abged",
    3: "abgcd",
    4: "fgbc",
    5: "afgcd",
    6: "afgedc",
    7: "abc",
    8: "abcdefg",
    9: "abcfgd",
}


def _render_glyph(digit, rng, size, stroke, noise):
    # Random affine jitter: scale, rotation, shear, translation.
    scale = rng.uniform(0.88, 1.05)
    theta = rng.uniform(-0.08, 0.08)
    shear = rng.uniform(-0.06, 0.06)
    tx = rng.uniform(-0.05, 0.05)
    ty = rng.uniform(-0.04, 0.04)
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    ys, xs = np.mgrid[0:size, 0:size]
    px = (xs + 0.5) / size
    py = (ys + 0.5) / size

    def warp(p):
        x, y = p[0] - 0.5, p[1] - 0.5
        x, y = x + shear * y, y
        x, y = cos_t * x - sin_t * y, sin_t * x + cos_t * y
        return (scale * x + 0.5 + tx, scale * y + 0.5 + ty)

    halfw = stroke * rng.uniform(0.8, 1.25) / size
    dist = np.full((size, size), np.inf)
    for name in _DIGIT_SEGMENTS[digit]:
        (p, q) = _SEGMENTS[name]
        p, q = np.array(warp(p)), np.array(warp(q))
        d = q - p
        denom = float(d @ d)
        if denom < 1e-12:
            t = np.zeros_like(px)
        else:
            t = np.clip(((px - p[0]) * d[0] + (py - p[1]) * d[1]) / denom, 0.0, 1.0)
        cx, cy = p[0] + t * d[0], p[1] + t * d[1]
        dist = np.minimum(dist, np.hypot(px - cx, py - cy))

    # 1-pixel anti-aliasing ramp around the stroke edge.
    img = np.clip((halfw - dist) * size + 0.5, 0.0, 1.0)
    img *= rng.uniform(0.7, 1.0)
    img += rng.normal(scale=noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_digits(
    n_per_class: int,
    seed: int,
    image_size: int = 28,
    stroke: float = 2.4,
    noise: float = 0.10,
) -> Dataset:
    """Procedurally rendered digit glyphs with jitter and pixel noise.

    A 10-class image fixture of real classification difficulty, used where a
    handwritten-digit corpus is exercised at desk scale. Deterministic per
    seed; intensities span [-1, 1] like loaded IDX data.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    images = np.empty((10 * n_per_class, image_size, image_size), dtype=np.float32)
    labels = np.empty(10 * n_per_class, dtype=np.int64)
    order = rng.permutation(10 * n_per_class)
    for slot, digit in zip(order, np.repeat(np.arange(10), n_per_class)):
        images[slot] = _render_glyph(int(digit), rng, image_size, stroke, noise) * 2 - 1
        labels[slot] = digit
    return Dataset(
        images=images,
        ids=np.arange(len(images), dtype=np.int64),
        num_classes=10,
        labels=labels,
    )
