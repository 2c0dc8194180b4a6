"""Datasets: the two-client circle task, label-shard partitioning, IDX files."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIRCLE_RADIUS = 26.0 / 7.0
CIRCLE_HALF_WIDTH = 5.0

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
_IDX_MAX_ITEMS = 1 << 31


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_class: int

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.intp)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} do not pair up"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_class):
            raise ValueError(f"labels must lie in [0, {self.n_class})")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx):
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.n_class)

    @staticmethod
    def concat(parts, n_class):
        if not parts:
            return LabeledDataset(np.zeros((0, 0)), np.zeros(0, dtype=np.intp), n_class)
        return LabeledDataset(
            np.concatenate([p.inputs for p in parts]),
            np.concatenate([p.labels for p in parts]),
            n_class,
        )


# --- synthetic circle ------------------------------------------------------


def circle_labels(points):
    """1 strictly inside the circle of radius 26/7 at the origin, else 0."""
    points = np.asarray(points, dtype=np.float64)
    return (np.sum(points * points, axis=1) < CIRCLE_RADIUS**2).astype(np.intp)


def gen_circle(n, rng, x1_range=(-CIRCLE_HALF_WIDTH, CIRCLE_HALF_WIDTH)):
    """``n`` points uniform on the square (optionally a vertical strip of it)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = x1_range
    x1 = rng.uniform(lo, hi, size=n)
    x2 = rng.uniform(-CIRCLE_HALF_WIDTH, CIRCLE_HALF_WIDTH, size=n)
    pts = np.column_stack([x1, x2])
    return LabeledDataset(pts, circle_labels(pts), 2)


def split_by_sorted_x1(dataset):
    """Lower half of x1 to client 0, upper half to client 1."""
    n = len(dataset)
    if n % 2:
        raise ValueError(f"need an even number of points, got {n}")
    order = np.argsort(dataset.inputs[:, 0], kind="stable")
    return dataset.subset(order[: n // 2]), dataset.subset(order[n // 2 :])


def circle_test_sets(client0, client1, n_per_client, rng):
    """Fresh test points for each client, drawn from its own x1 strip.

    The strips meet halfway between the two clients' training ranges.
    """
    cut = 0.5 * (client0.inputs[:, 0].max() + client1.inputs[:, 0].min())
    return (
        gen_circle(n_per_client, rng, (-CIRCLE_HALF_WIDTH, cut)),
        gen_circle(n_per_client, rng, (cut, CIRCLE_HALF_WIDTH)),
    )


# --- label-shard partitioning ----------------------------------------------


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    classes_per_client: int
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1 or self.classes_per_client < 1:
            raise ValueError("n_clients and classes_per_client must be positive")


def shard_partition(dataset, spec):
    """Sort by label, cut into equal contiguous shards, deal shards at random.

    Each client receives ``classes_per_client`` shards; when every class
    size is a multiple of the shard size a client sees at most that many
    labels. Shard sizes differ by at most one when the data does not divide
    evenly, so every point is assigned exactly once.
    """
    n_shards = spec.n_clients * spec.classes_per_client
    if len(dataset) < n_shards:
        raise ValueError(f"{len(dataset)} points cannot fill {n_shards} shards")
    order = np.argsort(dataset.labels, kind="stable")
    shards = np.array_split(order, n_shards)
    deal = np.random.default_rng(spec.seed).permutation(n_shards)
    k = spec.classes_per_client
    return [
        dataset.subset(np.concatenate([shards[s] for s in deal[c * k : (c + 1) * k]]))
        for c in range(spec.n_clients)
    ]


def distribute_test(test, client_train_sets, rng):
    """Give each client test points drawn like its training labels.

    Test points of each class are shuffled and split among the clients that
    hold that class, in proportion to how many training points of it they
    hold. Classes held by no client are dropped.
    """
    n_class = test.n_class
    held = np.array([np.bincount(t.labels, minlength=n_class) for t in client_train_sets])
    picks = [[] for _ in client_train_sets]
    for y in range(n_class):
        idx = rng.permutation(np.flatnonzero(test.labels == y))
        total = held[:, y].sum()
        if total == 0:
            continue
        bounds = np.round(np.cumsum(held[:, y]) / total * idx.size).astype(int)
        start = 0
        for c, stop in enumerate(bounds):
            picks[c].append(idx[start:stop])
            start = stop
    return [
        test.subset(np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.intp))
        for p in picks
    ]


def stratified_subsample(dataset, fraction, rng):
    """Keep ``fraction`` of each class, chosen uniformly at random."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1:
        return dataset
    keep = []
    for y in range(dataset.n_class):
        idx = np.flatnonzero(dataset.labels == y)
        k = int(round(fraction * idx.size))
        keep.append(rng.choice(idx, size=k, replace=False))
    return dataset.subset(np.sort(np.concatenate(keep)))


# --- IDX -------------------------------------------------------------------


class IdxParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def parse_idx(data):
    """Decode an unsigned-byte IDX stream into an ndarray of its shape."""
    data = bytes(data)
    if len(data) < 4:
        raise IdxParseError("truncated magic number", len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic not in (IDX_LABELS_MAGIC, IDX_IMAGES_MAGIC):
        raise IdxParseError(f"bad magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxParseError("truncated dimension header", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    total = 1
    for i, d in enumerate(dims):
        total *= d
        if total >= _IDX_MAX_ITEMS:
            raise IdxParseError("dimension product overflows", 4 + 4 * i)
    end = header + total
    if len(data) < end:
        raise IdxParseError(f"payload truncated: expected {total} bytes", len(data))
    if len(data) > end:
        raise IdxParseError("trailing bytes after payload", end)
    return np.frombuffer(data, dtype=np.uint8, count=total, offset=header).reshape(dims)


def serialize_idx(array):
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim not in (1, 3):
        raise ValueError("IDX writer takes 1-D or 3-D uint8 arrays")
    magic = IDX_LABELS_MAGIC if array.ndim == 1 else IDX_IMAGES_MAGIC
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def read_idx_file(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return parse_idx(fh.read())


def write_idx_file(path, array):
    Path(path).write_bytes(serialize_idx(array))


IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_idx_split(directory, split):
    """Images scaled to [0, 1] and flattened, with their labels."""
    directory = Path(directory)
    img_name, lab_name = IDX_FILES[split]
    images = read_idx_file(_find(directory, img_name))
    labels = read_idx_file(_find(directory, lab_name))
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels in {directory}")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(x, labels.astype(np.intp), int(labels.max()) + 1 if labels.size else 0)


def prepare_mnist_subset(out_dir, n_train_per_class=300, seed=0):
    """Write the 5000-image MNIST sample bundled with mlxtend as IDX files.

    ``n_train_per_class`` images of every digit go to the train files (300
    per digit gives 3000 images, 5% of the full 60000) and the rest to the
    test files.
    """
    import importlib.resources

    src = importlib.resources.files("mlxtend.data").joinpath("data/mnist_5k.csv.gz")
    with src.open("rb") as raw, gzip.open(raw, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",")
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    rng = np.random.default_rng(seed)
    train_idx = []
    for y in range(10):
        idx = np.flatnonzero(labels == y)
        train_idx.append(rng.choice(idx, size=n_train_per_class, replace=False))
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.setdiff1d(np.arange(labels.size), train_idx)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train_idx), ("test", test_idx)):
        img_name, lab_name = IDX_FILES[split]
        write_idx_file(out / img_name, images[idx])
        write_idx_file(out / lab_name, labels[idx])
    return out
