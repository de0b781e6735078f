"""Dataset loaders, client partitioning and synthetic generators."""
from __future__ import annotations

import csv
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

BUNDLED_DIR = Path(__file__).parent / "_data"
BUNDLED_MNIST = (
    BUNDLED_DIR / "mnist10k-images-idx3-ubyte.gz",
    BUNDLED_DIR / "mnist10k-labels-idx1-ubyte.gz",
)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    task: str

    def __len__(self):
        return len(self.targets)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.targets[idx], self.task)


# --- MNIST IDX -------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _idx_header(raw: bytes, magic: int, ndims: int, path) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(raw) >= 4:
        (found,) = struct.unpack(">I", raw[:4])
        if found != magic:
            raise DataFormatError(f"{path}: bad magic {found} at byte offset 0, expected {magic}")
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated header at byte offset {len(raw)} "
                              f"(need {need} bytes)")
    return tuple(struct.unpack(">" + "I" * ndims, raw[4:need]))


def load_mnist(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair (plain or gzipped).

    Returns a float64 ``(n, rows*cols)`` matrix scaled to [0, 1] and int64 labels.
    """
    raw_img = _read_bytes(images_path)
    n, rows, cols = _idx_header(raw_img, IDX_IMAGES_MAGIC, 3, images_path)
    expected = 16 + n * rows * cols
    if len(raw_img) < expected:
        raise DataFormatError(f"{images_path}: truncated pixel data at byte offset "
                              f"{len(raw_img)}, expected {expected} bytes")
    raw_lab = _read_bytes(labels_path)
    (m,) = _idx_header(raw_lab, IDX_LABELS_MAGIC, 1, labels_path)
    if len(raw_lab) < 8 + m:
        raise DataFormatError(f"{labels_path}: truncated label data at byte offset "
                              f"{len(raw_lab)}, expected {8 + m} bytes")
    if m != n:
        raise DataFormatError(f"{n} images but {m} labels")
    pixels = np.frombuffer(raw_img, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(raw_lab, dtype=np.uint8, count=m, offset=8).astype(np.int64)
    return images, labels


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Inverse of :func:`load_mnist` for uint8 ``(n, rows, cols)`` images."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# --- household power consumption -----------------------------------------

POWER_TEXT_COLUMNS = ("Date", "Time")


@dataclass(frozen=True)
class PowerData:
    features: np.ndarray
    target: np.ndarray
    feature_names: tuple[str, ...]
    dropped: int
    feature_mean: np.ndarray
    feature_std: np.ndarray


def zscore(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (x - mean) / std, mean, std


def load_power_csv(path, target: str = "Global_active_power") -> PowerData:
    """Parse the semicolon-separated UCI household power file.

    Rows containing a ``?`` (or empty) field are dropped; the remaining
    numeric columns other than ``target`` become z-scored features.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=";")
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if target not in header:
            raise DataFormatError(f"{path}: target column {target!r} not in header")
        numeric = [i for i, h in enumerate(header) if h not in POWER_TEXT_COLUMNS]
        rows, dropped = [], 0
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{line_no}: expected {len(header)} fields, "
                                      f"got {len(row)}")
            fields = [row[i].strip() for i in numeric]
            if any(f in ("?", "") for f in fields):
                dropped += 1
                continue
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{line_no}: {exc}") from None
    if not rows:
        raise DataFormatError(f"{path}: no complete rows ({dropped} dropped)")
    log.info("power data: %d rows kept, %d dropped for missing values", len(rows), dropped)
    table = np.asarray(rows, dtype=np.float64)
    names = [header[i] for i in numeric]
    t_col = names.index(target)
    feat_cols = [j for j in range(len(names)) if j != t_col]
    feats, mean, std = zscore(table[:, feat_cols])
    return PowerData(
        features=feats, target=table[:, t_col],
        feature_names=tuple(names[j] for j in feat_cols),
        dropped=dropped, feature_mean=mean, feature_std=std,
    )


# --- partitioning ----------------------------------------------------------

def partition_iid(n_samples: int, K: int, rng: np.random.Generator) -> dict[int, np.ndarray]:
    if K > n_samples:
        raise ValueError(f"cannot split {n_samples} samples across {K} clients")
    perm = rng.permutation(n_samples)
    return {c: np.sort(part) for c, part in enumerate(np.array_split(perm, K))}


def partition_noniid(
    labels: np.ndarray, K: int, shards_per_client: int, rng: np.random.Generator
) -> dict[int, np.ndarray]:
    """Sort-by-label shards: each client receives ``shards_per_client`` label-contiguous shards.

    When the shard count does not divide the sample count the last shard
    absorbs the remainder.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if K > n:
        raise ValueError(f"cannot split {n} samples across {K} clients")
    if shards_per_client < 1:
        raise ValueError("shards_per_client must be at least 1")
    n_shards = K * shards_per_client
    if n_shards > n:
        raise ValueError(f"{n_shards} shards requested for only {n} samples")
    order = np.argsort(labels, kind="stable")
    size = n // n_shards
    shards = [order[i * size:(i + 1) * size] for i in range(n_shards - 1)]
    shards.append(order[(n_shards - 1) * size:])
    pick = rng.permutation(n_shards)
    return {
        c: np.sort(np.concatenate([shards[s] for s in pick[c * shards_per_client:(c + 1) * shards_per_client]]))
        for c in range(K)
    }


def label_skew(partition: dict[int, np.ndarray], labels: np.ndarray) -> float:
    """Mean total-variation distance between client and global label histograms."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    glob = np.array([np.mean(labels == c) for c in classes])
    tv = []
    for idx in partition.values():
        local = labels[idx]
        hist = np.array([np.mean(local == c) for c in classes])
        tv.append(0.5 * np.abs(hist - glob).sum())
    return float(np.mean(tv))


# --- synthetic data --------------------------------------------------------

def synth_classification(
    n: int, dim: int, classes: int, margin: float, seed: int, spread: float = 1.0
) -> Dataset:
    """Isotropic Gaussian blobs whose closest pair of centres is ``margin * spread`` apart."""
    if not margin > 0:
        raise ValueError(f"margin must be positive, got {margin}")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((classes, dim))
    if classes > 1:
        gaps = np.linalg.norm(centres[:, None, :] - centres[None, :, :], axis=-1)
        closest = gaps[np.triu_indices(classes, 1)].min()
        centres *= margin * spread / closest
    labels = rng.permutation(np.arange(n) % classes)
    inputs = centres[labels] + spread * rng.standard_normal((n, dim))
    return Dataset(inputs, labels.astype(np.int64), "classification")


def synth_regression(n: int, dim: int, noise_std: float, seed: int) -> Dataset:
    """Targets from a fixed random linear map of standard-normal features, plus noise."""
    if noise_std < 0:
        raise ValueError(f"noise_std must be non-negative, got {noise_std}")
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal(dim) / np.sqrt(dim)
    inputs = rng.standard_normal((n, dim))
    targets = inputs @ weights + noise_std * rng.standard_normal(n)
    return Dataset(inputs, targets, "regression")


def export_csv(ds: Dataset, path) -> None:
    """Write a dataset as CSV (features x0..x{d-1}, then target) for inspection."""
    d = ds.inputs.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(d)] + ["target"])
        for x, y in zip(ds.inputs, ds.targets):
            w.writerow([repr(float(v)) for v in x] + [repr(y.item())])


def train_test_split(ds: Dataset, test_fraction: float, rng: np.random.Generator):
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    perm = rng.permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))
