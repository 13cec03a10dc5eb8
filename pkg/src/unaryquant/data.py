"""Dataset ingestion, synthetic corpora, and heterogeneous client partitioning.

Real image corpora are read from IDX files (big-endian magic 0x00000803 for
images, 0x00000801 for labels), with pixels scaled to [0, 1]. Because some
environments have no copy of MNIST, the module can also synthesize an
MNIST-shaped corpus of dot-matrix digit glyphs under random affine jitter,
written through the same IDX path so the parser is exercised end to end.

Client heterogeneity follows the usual recipe: for every class, a Dirichlet
draw over clients decides how that class's examples are split.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised when an IDX file is malformed; messages carry byte offsets."""


@dataclass
class Dataset:
    """Flat-feature labeled examples; features live in [0, 1]."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int = 10
    image_shape: tuple[int, int] | None = None

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, n: int) -> "Dataset":
        """First-n examples; deterministic."""
        n = min(n, len(self))
        return Dataset(
            features=self.features[:n],
            labels=self.labels[:n],
            n_classes=self.n_classes,
            image_shape=self.image_shape,
        )


@dataclass
class ClientDataset:
    """One client's local examples plus its class histogram."""

    features: np.ndarray
    labels: np.ndarray
    class_histogram: np.ndarray
    indices: np.ndarray  # positions in the source dataset
    n_classes: int = 10

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    alpha: float
    seed: int

    def __post_init__(self) -> None:
        if self.n_clients < 2:
            raise ValueError(f"need at least 2 clients, got {self.n_clients}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


def _open_maybe_gz(path: str | Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _read_header(raw: bytes, path: Path, magic: int, n_dims: int) -> tuple[int, ...]:
    header_len = 4 * (1 + n_dims)
    if len(raw) < header_len:
        raise IdxFormatError(
            f"{path}: truncated header, file ends at byte {len(raw)} but "
            f"{header_len} header bytes are required"
        )
    fields = struct.unpack(f">{1 + n_dims}i", raw[:header_len])
    if fields[0] != magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{fields[0]:08x} at byte offset 0, expected 0x{magic:08x}"
        )
    return fields[1:]


def read_idx_images(path: str | Path) -> np.ndarray:
    """Raw uint8 image tensor (count, rows, cols) from an IDX file."""
    path = Path(path)
    raw = _open_maybe_gz(path)
    count, rows, cols = _read_header(raw, path, IMAGES_MAGIC, 3)
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise IdxFormatError(
            f"{path}: truncated pixel data, file ends at byte {len(raw)} but "
            f"{expected} bytes are required for {count} images of {rows}x{cols}"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows, cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    path = Path(path)
    raw = _open_maybe_gz(path)
    (count,) = _read_header(raw, path, LABELS_MAGIC, 1)
    expected = 8 + count
    if len(raw) < expected:
        raise IdxFormatError(
            f"{path}: truncated label data, file ends at byte {len(raw)} but "
            f"{expected} bytes are required for {count} labels"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Load an (images, labels) IDX pair into a normalized dataset.

    Pixel bytes are scaled by 1/255; the two files must agree on the
    example count.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images_path} holds {images.shape[0]} images but "
            f"{labels_path} holds {labels.shape[0]} labels"
        )
    n, rows, cols = images.shape
    features = images.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(
        features=features,
        labels=labels.astype(np.int64),
        n_classes=10,
        image_shape=(rows, cols),
    )


def save_idx(
    images: np.ndarray,
    labels: np.ndarray,
    images_path: str | Path,
    labels_path: str | Path,
) -> None:
    """Write a uint8 (n, rows, cols) image tensor and labels as an IDX pair."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"images must be (n, rows, cols), got shape {images.shape}")
    if images.shape[0] != labels.shape[0]:
        raise ValueError("image and label counts differ")
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4i", IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2i", LABELS_MAGIC, n))
        f.write(labels.tobytes())


def load_mnist_dir(root: str | Path) -> tuple[Dataset, Dataset]:
    """Load the standard MNIST file pair layout from a directory.

    Accepts either plain or .gz files with the canonical names.
    """
    root = Path(root)

    def find(stem: str) -> Path:
        for suffix in ("", ".gz"):
            candidate = root / f"{stem}{suffix}"
            if candidate.exists():
                return candidate
        raise FileNotFoundError(f"{root}: missing {stem}[.gz]")

    train = load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    test = load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    return train, test


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of `total` items matching proportions exactly.

    Floors the targets, then hands the leftover items to the largest
    fractional parts (ties to the lower index, so allocation is
    deterministic).
    """
    targets = proportions * total
    counts = np.floor(targets).astype(np.int64)
    remainder = total - int(counts.sum())
    if remainder > 0:
        fractional = targets - counts
        order = np.lexsort((np.arange(len(counts)), -fractional))
        counts[order[:remainder]] += 1
    return counts


def dirichlet_partition(dataset: Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    """Split a dataset into heterogeneous client shards.

    For each class, client shares are drawn from Dirichlet(alpha * 1) and
    that class's examples are dealt out by largest-remainder rounding, so
    the shards form an exact partition. If a draw leaves any client empty
    the whole assignment is redrawn (up to 100 attempts); as a last resort
    single examples are moved from the largest shard.
    """
    n_total = len(dataset)
    if n_total == 0:
        raise ValueError("cannot partition an empty dataset")
    if spec.n_clients > n_total:
        raise ValueError(
            f"cannot split {n_total} examples across {spec.n_clients} clients"
        )
    rng = np.random.default_rng(spec.seed)
    class_indices = [
        np.nonzero(dataset.labels == c)[0] for c in range(dataset.n_classes)
    ]

    assignment: list[list[np.ndarray]] = []
    for _ in range(100):
        assignment = [[] for _ in range(spec.n_clients)]
        for idx in class_indices:
            if len(idx) == 0:
                continue
            shares = rng.dirichlet(np.full(spec.n_clients, spec.alpha))
            counts = _largest_remainder_counts(shares, len(idx))
            shuffled = rng.permutation(idx)
            boundaries = np.cumsum(counts)[:-1]
            for client, chunk in enumerate(np.split(shuffled, boundaries)):
                assignment[client].append(chunk)
        if all(sum(len(c) for c in chunks) >= 1 for chunks in assignment):
            break

    per_client = [
        np.sort(np.concatenate(chunks)) if chunks else np.empty(0, dtype=np.int64)
        for chunks in assignment
    ]
    # Last-resort repair: peel single examples off the largest shard.
    while any(len(ix) == 0 for ix in per_client):
        empty = min(i for i, ix in enumerate(per_client) if len(ix) == 0)
        donor = int(np.argmax([len(ix) for ix in per_client]))
        per_client[empty] = per_client[donor][-1:]
        per_client[donor] = per_client[donor][:-1]

    clients = []
    for ix in per_client:
        labels = dataset.labels[ix]
        clients.append(
            ClientDataset(
                features=dataset.features[ix],
                labels=labels,
                class_histogram=np.bincount(labels, minlength=dataset.n_classes),
                indices=ix,
                n_classes=dataset.n_classes,
            )
        )
    return clients


def synthetic_gaussian(
    n_per_class: int,
    classes: int,
    dim: int,
    seed: int,
    noise: float = 0.1,
) -> Dataset:
    """Class-conditional Gaussian blobs with unit-separated means.

    Means are the binary codes of the class index on the unit hypercube
    (any two differ in at least one coordinate, so they are >= 1 apart);
    features are clamped to [0, 1].
    """
    if min(n_per_class, classes, dim) < 1:
        raise ValueError("n_per_class, classes and dim must be positive")
    if classes > 2**dim:
        raise ValueError(f"cannot place {classes} unit-separated means in {dim} dims")
    rng = np.random.default_rng(seed)
    means = np.array(
        [[(c >> j) & 1 for j in range(dim)] for c in range(classes)], dtype=np.float64
    )
    features = []
    labels = []
    for c in range(classes):
        block = means[c] + rng.normal(0.0, noise, size=(n_per_class, dim))
        features.append(block)
        labels.append(np.full(n_per_class, c, dtype=np.int64))
    features = np.clip(np.concatenate(features), 0.0, 1.0)
    labels = np.concatenate(labels)
    order = rng.permutation(len(labels))
    return Dataset(features=features[order], labels=labels[order], n_classes=classes)


# 5x7 dot-matrix digit glyphs, the seed shapes of the synthetic corpus.
_DIGIT_GLYPHS = [
    ".###.|#...#|#..##|#.#.#|##..#|#...#|.###.",
    "..#..|.##..|..#..|..#..|..#..|..#..|.###.",
    ".###.|#...#|....#|...#.|..#..|.#...|#####",
    "#####|...#.|..#..|...#.|....#|#...#|.###.",
    "...#.|..##.|.#.#.|#..#.|#####|...#.|...#.",
    "#####|#....|####.|....#|....#|#...#|.###.",
    "..##.|.#...|#....|####.|#...#|#...#|.###.",
    "#####|....#|...#.|..#..|.#...|.#...|.#...",
    ".###.|#...#|#...#|.###.|#...#|#...#|.###.",
    ".###.|#...#|#...#|.####|....#|...#.|.##..",
]


def _glyph_bases(size: int) -> np.ndarray:
    """Upscaled glyph canvases, one (size, size) float image per digit."""
    bases = np.zeros((10, size, size))
    scale = size // 7
    for digit, art in enumerate(_DIGIT_GLYPHS):
        rows = art.split("|")
        glyph = np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows])
        up = np.kron(glyph, np.ones((scale, scale)))
        r0 = (size - up.shape[0]) // 2
        c0 = (size - up.shape[1]) // 2
        bases[digit, r0 : r0 + up.shape[0], c0 : c0 + up.shape[1]] = up
    return bases


def _render_digit(base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One jittered rendering: affine warp, blur, contrast, pixel noise."""
    size = base.shape[0]
    center = (size - 1) / 2.0
    angle = rng.uniform(-0.21, 0.21)  # radians, ~12 degrees
    sx, sy = np.exp(rng.uniform(-0.15, 0.15, size=2))
    shear = rng.uniform(-0.15, 0.15)
    shift = rng.uniform(-2.5, 2.5, size=2)
    cos, sin = np.cos(angle), np.sin(angle)
    matrix = np.array([[cos, -sin], [sin, cos]]) @ np.array([[sx, shear * sx], [0.0, sy]])
    offset = center - matrix @ (center + shift)
    img = ndimage.affine_transform(base, matrix, offset=offset, order=1, mode="constant")
    img = ndimage.gaussian_filter(img, sigma=rng.uniform(0.5, 1.0))
    img = img * rng.uniform(0.7, 1.0) + rng.normal(0.0, 0.06, img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_digits(
    n_train: int,
    n_test: int,
    seed: int,
    image_size: int = 28,
) -> tuple[Dataset, Dataset]:
    """Deterministic MNIST-shaped digit corpus.

    Images are 8-bit quantized at generation so that a round trip through
    the IDX files is lossless.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one train and one test example")
    rng = np.random.default_rng(seed)
    bases = _glyph_bases(image_size)
    n = n_train + n_test
    labels = rng.permutation(np.arange(n) % 10).astype(np.int64)
    images = np.empty((n, image_size, image_size), dtype=np.uint8)
    for i, label in enumerate(labels):
        images[i] = np.round(_render_digit(bases[label], rng) * 255.0).astype(np.uint8)

    def to_dataset(imgs: np.ndarray, labs: np.ndarray) -> Dataset:
        return Dataset(
            features=imgs.reshape(len(imgs), -1).astype(np.float64) / 255.0,
            labels=labs,
            n_classes=10,
            image_shape=(image_size, image_size),
        )

    return (
        to_dataset(images[:n_train], labels[:n_train]),
        to_dataset(images[n_train:], labels[n_train:]),
    )


def ensure_digit_corpus(
    root: str | Path,
    n_train: int,
    n_test: int,
    seed: int,
) -> tuple[Path, Path, Path, Path]:
    """Materialize the synthetic digit corpus as IDX files, once.

    Returns (train images, train labels, test images, test labels) paths;
    existing files are reused so repeated runs share a corpus.
    """
    root = Path(root) / f"digits-train{n_train}-test{n_test}-seed{seed}"
    paths = (
        root / "train-images-idx3-ubyte",
        root / "train-labels-idx1-ubyte",
        root / "t10k-images-idx3-ubyte",
        root / "t10k-labels-idx1-ubyte",
    )
    if not all(p.exists() for p in paths):
        root.mkdir(parents=True, exist_ok=True)
        train, test = synthetic_digits(n_train, n_test, seed)
        size = train.image_shape[0]
        save_idx(
            np.round(train.features * 255).astype(np.uint8).reshape(-1, size, size),
            train.labels,
            paths[0],
            paths[1],
        )
        save_idx(
            np.round(test.features * 255).astype(np.uint8).reshape(-1, size, size),
            test.labels,
            paths[2],
            paths[3],
        )
    return paths
