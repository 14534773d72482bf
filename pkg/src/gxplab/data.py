"""Dataset ingestion, synthetic task generators, and perturbation sampling.

All datasets hold channels-first float32 images in [0,1] with integer labels;
no normalization beyond the [0,1] scaling, so perturbation budgets keep their
pixel-unit meaning.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixel bytes

DATASET_NAMES = ("planted", "synth10", "fmnist", "fmnist-small", "cifar10")


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W) float32 in [0,1]
    labels: np.ndarray          # (N,) int64
    split: str
    class_count: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.split, self.class_count,
                       dict(self.provenance, subset=len(idx)))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self))
        if rng is not None:
            rng.shuffle(order)
        for lo in range(0, len(self), batch_size):
            sel = order[lo:lo + batch_size]
            yield self.images[sel], self.labels[sel]


def _read_bytes(path) -> bytes:
    if str(path).endswith(".gz"):
        with gzip.open(path, "rb") as fh:
            return fh.read()
    with open(path, "rb") as fh:
        return fh.read()


def _digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def read_idx(path) -> np.ndarray:
    """Parse one big-endian IDX file.

    Image files (magic 0x00000803) come back as float32 (N, H, W) scaled to
    [0,1]; label files (magic 0x00000801) as int64 (N,).
    """
    blob = _read_bytes(path)
    if len(blob) < 4:
        raise ValueError(f"truncated IDX file: only {len(blob)} bytes, wanted magic at offset 0")
    magic = struct.unpack(">I", blob[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise ValueError(f"bad IDX magic 0x{magic:08x} at offset 0")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise ValueError(f"truncated IDX header: {len(blob)} bytes, wanted {header} (offset 4)")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    expected = header + int(np.prod(dims))
    if len(blob) < expected:
        raise ValueError(
            f"truncated IDX data: {len(blob)} bytes, wanted {expected} (offset {header})"
        )
    raw = np.frombuffer(blob, dtype=np.uint8, offset=header, count=int(np.prod(dims)))
    if magic == IDX_LABELS_MAGIC:
        return raw.astype(np.int64)
    return (raw.reshape(dims).astype(np.float32)) / 255.0


def load_idx(images_path, labels_path, split: str = "train", class_count: int | None = None) -> Dataset:
    """Pair an IDX image file with its IDX label file."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path}: expected an image file (magic 0x{IDX_IMAGES_MAGIC:08x})")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: expected a label file (magic 0x{IDX_LABELS_MAGIC:08x})")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    return Dataset(
        images[:, None, :, :],
        labels,
        split,
        class_count or int(labels.max()) + 1,
        {
            "images": {"path": str(images_path), "sha256": _digest(_read_bytes(images_path))},
            "labels": {"path": str(labels_path), "sha256": _digest(_read_bytes(labels_path))},
        },
    )


def load_cifar_binary(path, split: str = "train") -> Dataset:
    """One CIFAR-10 binary batch: records of 1 label byte + 3072 channel-planar pixels."""
    blob = _read_bytes(path)
    if len(blob) == 0 or len(blob) % _CIFAR_RECORD:
        raise ValueError(
            f"bad CIFAR binary size {len(blob)}: not a multiple of {_CIFAR_RECORD} "
            f"(offset {len(blob) - len(blob) % _CIFAR_RECORD})"
        )
    arr = np.frombuffer(blob, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    images = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, split, 10,
                   {"path": str(path), "sha256": _digest(blob), "records": arr.shape[0]})


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------


def synth_planted(n: int, d: int = 8, seed: int = 0, split: str = "train") -> Dataset:
    """Binary task whose label is carried entirely by pixel (0, 0).

    The designated pixel is 1.0 or 0.0 (the "sign" in centered units); every
    other pixel is uniform nuisance on [0.3, 0.7], symmetric around 0.5 so an
    imputed replacement of the planted pixel lands near the decision boundary.
    """
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.3, 0.7, size=(n, 1, d, d)).astype(np.float32)
    labels = rng.integers(0, 2, size=n).astype(np.int64)
    images[:, 0, 0, 0] = labels.astype(np.float32)
    return Dataset(images, labels, split, 2, {"generator": "planted", "seed": seed, "d": d})


_SYNTH10_SHAPE = (1, 28, 28)
_SYNTH10_CLASSES = 10
_SYNTH10_STRUCTURE_SEED = 515151  # class structure is fixed across splits


def _synth10_structure():
    H = W = 16
    rng = np.random.default_rng(_SYNTH10_STRUCTURE_SEED)
    base = gaussian_filter(rng.standard_normal((H, W)), 3.5)
    base = 0.5 + 0.05 * base / base.std()
    blobs = np.empty((_SYNTH10_CLASSES, H, W))
    carriers = np.empty((_SYNTH10_CLASSES, H, W))
    ii, jj = np.mgrid[0:H, 0:W]
    for c in range(_SYNTH10_CLASSES):
        if c == 0:
            ci = cj = 8.0
        else:
            angle = 2 * np.pi * (c - 1) / (_SYNTH10_CLASSES - 1)
            ci, cj = 8 + 5 * np.sin(angle), 8 + 5 * np.cos(angle)
        blobs[c] = 0.55 * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * 2.0**2))
        carriers[c] = rng.choice([-1.0, 1.0], size=(H, W))
    return base, blobs, carriers


def synth10(n: int, seed: int = 0, split: str = "train") -> Dataset:
    """Deterministic 10-class 16x16 grayscale task with a robust/non-robust
    feature split: each class owns a low-frequency blob (large margin) and a
    dense +-0.04 pixel carrier (perfectly predictive but erasable within a
    small L-inf budget). Natural training latches onto the carrier; robust
    training must rely on the blob.
    """
    base, blobs, carriers = _synth10_structure()
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, _SYNTH10_CLASSES, size=n).astype(np.int64)
    smooth = gaussian_filter(
        rng.standard_normal((n,) + base.shape), (0.0, 1.8, 1.8)
    )
    smooth *= 0.05 / smooth.std(axis=(1, 2), keepdims=True)
    pixel = rng.normal(0.0, 0.02, size=(n,) + base.shape)
    x = base[None] + blobs[labels] + 0.04 * carriers[labels] + smooth + pixel
    images = np.clip(x, 0.0, 1.0).astype(np.float32)[:, None]
    return Dataset(images, labels, split, _SYNTH10_CLASSES,
                   {"generator": "synth10", "seed": seed})


# ---------------------------------------------------------------------------
# perturbation sampling
# ---------------------------------------------------------------------------


@dataclass
class PerturbationSpec:
    """Prediction-preserving gaussian neighborhood: isotropic noise of standard
    deviation sigma_noise, m samples, resampling until the prediction matches
    (bounded by max_attempts rounds), seeded."""

    sigma_noise: float = 0.05
    count: int = 32
    max_attempts: int = 10
    seed: int = 0


@dataclass
class PerturbationBatch:
    samples: np.ndarray   # (m', ...) accepted perturbations, clipped to [0,1]
    requested: int
    short: bool           # True when the attempt cap left fewer than requested

    def __len__(self) -> int:
        return self.samples.shape[0]


def sample_consistent_perturbations(model, x, spec: PerturbationSpec) -> PerturbationBatch:
    """Draw spec.count noisy copies of x that the model classifies like x.

    Rejected draws are resampled (vectorized rounds) up to spec.max_attempts;
    if the cap is exhausted the batch comes back short with a flag.
    """
    x = np.asarray(x)
    y0 = int(model.predict(x[None])[0])
    rng = np.random.default_rng(spec.seed)
    accepted: list[np.ndarray] = []
    pending = spec.count
    for _ in range(spec.max_attempts):
        if pending <= 0:
            break
        noise = rng.normal(0.0, spec.sigma_noise, size=(pending,) + x.shape)
        cand = np.clip(x[None] + noise, 0.0, 1.0).astype(x.dtype)
        ok = model.predict(cand) == y0
        if ok.any():
            accepted.append(cand[ok])
            pending -= int(ok.sum())
    samples = (np.concatenate(accepted, axis=0)[:spec.count]
               if accepted else np.empty((0,) + x.shape, dtype=x.dtype))
    return PerturbationBatch(samples, spec.count, short=pending > 0)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

_FMNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def default_data_dir() -> str:
    return os.environ.get("GXP_DATA_DIR", "data")


def find_fmnist(data_dir=None, split: str = "train"):
    """Locate the IDX pair for a split (plain or .gz); None when absent."""
    root = data_dir or default_data_dir()
    images, labels = _FMNIST_FILES[split]
    pair = []
    for name in (images, labels):
        hit = None
        for cand in (name, name + ".gz"):
            p = os.path.join(root, cand)
            if os.path.exists(p):
                hit = p
                break
        if hit is None:
            return None
        pair.append(hit)
    return tuple(pair)


def get_dataset(name: str, split: str = "train", n: int | None = None,
                seed: int = 0, data_dir=None) -> Dataset:
    """Resolve a dataset by registry name.

    planted      synthetic planted-pixel binary task (default 2000/500)
    synth10      synthetic 10-class image task (default 10000/2000)
    fmnist       IDX files under data_dir (or $GXP_DATA_DIR, default ./data)
    fmnist-small fmnist truncated to the first 10000 train / 2000 test samples
    cifar10      CIFAR binary batches under data_dir
    """
    off = 0 if split == "train" else 1
    if name == "planted":
        return synth_planted(n or (2000 if split == "train" else 500),
                             seed=seed + off, split=split)
    if name == "synth10":
        return synth10(n or (10000 if split == "train" else 2000),
                       seed=seed + off, split=split)
    if name in ("fmnist", "fmnist-small"):
        pair = find_fmnist(data_dir, split)
        if pair is None:
            raise FileNotFoundError(
                f"FMNIST IDX files for split {split!r} not found under "
                f"{data_dir or default_data_dir()!r}"
            )
        ds = load_idx(pair[0], pair[1], split=split, class_count=10)
        if name == "fmnist-small":
            ds = ds.subset(np.arange(min(len(ds), 10000 if split == "train" else 2000)))
        if n is not None:
            ds = ds.subset(np.arange(min(len(ds), n)))
        return ds
    if name == "cifar10":
        root = data_dir or default_data_dir()
        if split == "train":
            parts = [load_cifar_binary(os.path.join(root, f"data_batch_{i}.bin"), split)
                     for i in range(1, 6)]
            images = np.concatenate([p.images for p in parts])
            labels = np.concatenate([p.labels for p in parts])
            ds = Dataset(images, labels, split, 10,
                         {"batches": [p.provenance for p in parts]})
        else:
            ds = load_cifar_binary(os.path.join(root, "test_batch.bin"), split)
        if n is not None:
            ds = ds.subset(np.arange(min(len(ds), n)))
        return ds
    raise ValueError(f"unknown dataset {name!r}; expected one of {DATASET_NAMES}")
