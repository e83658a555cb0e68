"""Datasets, the simulated label oracle, synthetic domain pairs and IDX files."""

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from lowbudget.errors import ContractViolation, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    """Samples with stable integer ids and optional labels.

    ``X`` is ``(n, dim)`` for flat vectors or ``(n, H, W[, C])`` for images.
    """

    X: np.ndarray
    ids: np.ndarray
    num_classes: int
    labels: np.ndarray = None
    domain_role: str = "SOURCE"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        ids = np.asarray(self.ids, dtype=np.int64)
        if X.shape[0] != ids.shape[0]:
            raise ContractViolation(f"{X.shape[0]} samples but {ids.shape[0]} ids")
        if np.unique(ids).shape[0] != ids.shape[0]:
            raise ContractViolation("sample ids must be unique")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "ids", ids)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != ids.shape:
                raise ContractViolation("labels must match the number of samples")
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ContractViolation(f"labels must index classes in [0, {self.num_classes})")
            object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.ids.shape[0]

    @property
    def labeled(self):
        return self.labels is not None

    @property
    def feature_dim(self):
        return int(np.prod(self.X.shape[1:]))

    def flat(self):
        return self.X.reshape(len(self), -1)

    def take(self, positions):
        positions = np.asarray(positions, dtype=np.int64)
        return replace(
            self,
            X=self.X[positions],
            ids=self.ids[positions],
            labels=None if self.labels is None else self.labels[positions],
        )

    def positions_of(self, ids):
        lookup = {int(i): p for p, i in enumerate(self.ids)}
        try:
            return np.array([lookup[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise ContractViolation(f"id {exc.args[0]} is not in this dataset") from None

    def subset(self, ids):
        return self.take(self.positions_of(ids))

    def unlabeled(self):
        return replace(self, labels=None)


@dataclass
class LabelOracle:
    """Simulated annotator holding the withheld target labels.

    Every call to ``query`` is logged; ``query_count`` is the labeling budget
    consumed so far.
    """

    labels: dict
    log: list = field(default_factory=list)

    @property
    def query_count(self):
        return sum(len(entry) for entry in self.log)

    def query(self, ids):
        ids = [int(i) for i in ids]
        unknown = [i for i in ids if i not in self.labels]
        if unknown:
            raise ContractViolation(f"oracle has no sample with id {unknown[0]}")
        self.log.append(ids)
        return np.array([self.labels[i] for i in ids], dtype=np.int64)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump({"labels": {str(k): int(v) for k, v in sorted(self.labels.items())}, "log": self.log}, fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        return cls({int(k): int(v) for k, v in raw["labels"].items()}, [list(map(int, e)) for e in raw["log"]])


def query_labels(oracle, selection, target):
    """Ask the oracle for the labels of ``selection`` and return the labeled pool."""
    ids = list(selection.selected_ids)
    labels = oracle.query(ids)
    pool = target.subset(ids)
    return replace(pool, labels=labels)


# ---------------------------------------------------------------------------
# synthetic two-domain benchmark
# ---------------------------------------------------------------------------


def gen_two_domain_gaussians(
    num_classes=3,
    dim=2,
    n_per_class=300,
    rotation_deg=30.0,
    translation=None,
    noise=0.25,
    seed=0,
    radius=2.0,
    cluster_std=0.8,
    test_fraction=0.5,
):
    """Labeled source clusters and a shifted, unlabeled copy as the target domain.

    The source and the target training split both hold ``n_per_class`` samples
    per class; target draws are enlarged so that ``test_fraction`` of them form
    the test split.
    Class means sit on a circle of ``radius`` in the first two coordinates.
    Target samples are fresh draws from the same clusters, rotated by
    ``rotation_deg`` in the first plane, translated and corrupted with isotropic
    noise of std ``noise``. Returns ``(source, target_train, target_test, oracle)``;
    target training labels live only in the oracle.
    """
    if num_classes < 2 or dim < 2 or n_per_class < 10:
        raise ContractViolation("need num_classes >= 2, dim >= 2 and n_per_class >= 10")
    if not 0.0 < test_fraction < 1.0:
        raise ContractViolation("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)

    def draw(per_class):
        y = np.repeat(np.arange(num_classes), per_class)
        x = means[y] + rng.normal(0.0, cluster_std, size=(y.size, dim))
        return x, y

    xs, ys = draw(n_per_class)
    # enough target draws that the training split holds n_per_class per class
    xt, yt = draw(int(round(n_per_class / (1.0 - test_fraction))))
    theta = math.radians(rotation_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    xt[:, :2] = xt[:, :2] @ rot.T
    if translation is not None:
        xt = xt + np.broadcast_to(np.asarray(translation, dtype=np.float64), (dim,))
    if noise:
        xt = xt + rng.normal(0.0, noise, size=xt.shape)

    ps = rng.permutation(ys.size)
    source = Dataset(xs[ps], np.arange(ys.size), num_classes, ys[ps], "SOURCE")
    pt = rng.permutation(yt.size)
    xt, yt = xt[pt], yt[pt]
    n_train = num_classes * n_per_class
    ids = np.arange(yt.size)
    target = Dataset(xt[:n_train], ids[:n_train], num_classes, None, "TARGET")
    target_test = Dataset(xt[n_train:], ids[n_train:], num_classes, yt[n_train:], "TARGET")
    oracle = LabelOracle({int(i): int(c) for i, c in zip(ids[:n_train], yt[:n_train])})
    return source, target, target_test, oracle


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def make_batches(dataset, batch_size, seed, epoch):
    """Shuffled row positions split into batches; the last batch may be short."""
    if batch_size < 1:
        raise ContractViolation("batch_size must be >= 1")
    n = len(dataset)
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


def _read_idx(path, expected_magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise FormatError(f"{path}: truncated data at offset {len(raw)}, expected {header + count} bytes")
    if len(raw) > header + count:
        raise FormatError(f"{path}: {len(raw) - header - count} trailing bytes at offset {header + count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, num_classes=10, domain_role="TARGET"):
    """Read unsigned-byte IDX images (and optional labels); pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if labels.shape[0] != images.shape[0]:
            raise FormatError(
                f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images (count field at offset 4)"
            )
        if labels.size:
            num_classes = max(num_classes, int(labels.max()) + 1)
    X = images.astype(np.float64) / 255.0
    return Dataset(X, np.arange(images.shape[0]), num_classes, labels, domain_role)


def write_idx(path, array):
    """Write a uint8 array as IDX (rank 3 images or rank 1 labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# ---------------------------------------------------------------------------
# delimited text
# ---------------------------------------------------------------------------


def save_csv(dataset, path, with_labels=True):
    """``id,label,f0,f1,...``; the label column is omitted for unlabeled data."""
    labeled = with_labels and dataset.labeled
    flat = dataset.flat()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + (["label"] if labeled else []) + [f"f{j}" for j in range(flat.shape[1])])
        for row in range(len(dataset)):
            head = [int(dataset.ids[row])] + ([int(dataset.labels[row])] if labeled else [])
            w.writerow(head + [repr(float(v)) for v in flat[row]])


def load_csv(path, num_classes, domain_role="TARGET", shape=None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["id"]:
        raise FormatError(f"{path}: missing 'id' header at line 1")
    header = rows[0]
    labeled = len(header) > 1 and header[1] == "label"
    start = 2 if labeled else 1
    try:
        ids = np.array([int(r[0]) for r in rows[1:]], dtype=np.int64)
        labels = np.array([int(r[1]) for r in rows[1:]], dtype=np.int64) if labeled else None
        X = np.array([[float(v) for v in r[start:]] for r in rows[1:]], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    X = X.reshape((len(ids), len(header) - start))
    if shape is not None:
        X = X.reshape((len(ids), *shape))
    return Dataset(X, ids, num_classes, labels, domain_role)
