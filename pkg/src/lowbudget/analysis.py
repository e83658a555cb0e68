"""Diagnostics: entropy-accuracy curves, selection histograms and region reports.

Everything here produces plot data as delimited text; rendering is left to
external tools.
"""

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from lowbudget.errors import ContractViolation
from lowbudget.network import Domain
from lowbudget.scoring import _row_entropy


@dataclass(frozen=True, eq=False)
class EntropyAccuracyCurve:
    prefix_sizes: np.ndarray
    entropies: np.ndarray
    accuracies: np.ndarray
    sample_ids: np.ndarray
    fingerprint: str = ""
    dataset_digest: str = ""

    def __len__(self):
        return self.prefix_sizes.shape[0]

    def to_csv(self):
        lines = ["prefix_size,entropy,accuracy"]
        for i, h, a in zip(self.prefix_sizes.tolist(), self.entropies.tolist(), self.accuracies.tolist()):
            lines.append(f"{i},{h!r},{a!r}")
        return "\n".join(lines) + "\n"


def _dataset_digest(ids):
    return hashlib.sha256(np.sort(np.asarray(ids, dtype=np.int64)).tobytes()).hexdigest()


def curve_from_predictions(entropies, correct, ids, fingerprint=""):
    """Prefix accuracy over samples sorted by ascending entropy (ties by id)."""
    entropies = np.asarray(entropies, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    ids = np.asarray(ids, dtype=np.int64)
    m = entropies.shape[0]
    if m == 0:
        raise ContractViolation("cannot build a curve over an empty dataset")
    order = np.lexsort((ids, entropies))
    sizes = np.arange(1, m + 1)
    acc = np.cumsum(correct[order]) / sizes
    return EntropyAccuracyCurve(sizes, entropies[order], acc, ids[order], fingerprint, _dataset_digest(ids))


def entropy_accuracy_curve(model, labeled_target, domain=Domain.TARGET):
    if len(labeled_target) == 0:
        raise ContractViolation("cannot build a curve over an empty dataset")
    if not labeled_target.labeled:
        raise ContractViolation("entropy-accuracy curve needs labels")
    probs = model.predict(labeled_target.X, domain)
    correct = probs.argmax(axis=1) == labeled_target.labels
    return curve_from_predictions(_row_entropy(probs), correct, labeled_target.ids, model.fingerprint())


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def to_csv(self):
        lines = ["bin_lo,bin_hi,count"]
        for lo, hi, c in zip(self.edges[:-1].tolist(), self.edges[1:].tolist(), self.counts.tolist()):
            lines.append(f"{lo!r},{hi!r},{c}")
        return "\n".join(lines) + "\n"


def selection_histogram(table, selection, bins=20):
    """Counts of selected samples in equal-width bins spanning the full table's score range."""
    if bins < 1:
        raise ContractViolation("bins must be >= 1")
    lookup = table.as_dict()
    try:
        picked = np.array([lookup[i] for i in selection.selected_ids], dtype=np.float64)
    except KeyError as exc:
        raise ContractViolation(f"selected id {exc.args[0]} is not in the score table") from None
    lo, hi = float(table.scores.min()), float(table.scores.max())
    edges = np.linspace(lo, hi, bins + 1)
    if hi == lo:
        counts = np.zeros(bins, dtype=np.int64)
        counts[0] = picked.shape[0]
        return Histogram(edges, counts)
    counts, _ = np.histogram(picked, bins=edges)
    return Histogram(edges, counts.astype(np.int64))


def compare_regions(curves, low_quantile=0.2, high_quantile=0.8):
    """Per-model accuracy behaviour over the low- and high-entropy ends of the curve.

    ``low_drop`` is the best prefix accuracy inside the low region minus the
    accuracy at its cut; ``high_drop`` is the accuracy at the high cut minus the
    final accuracy.
    """
    if not 0.0 < low_quantile <= high_quantile <= 1.0:
        raise ContractViolation("need 0 < low_quantile <= high_quantile <= 1")
    digests = {c.dataset_digest for c in curves.values()}
    if len(digests) > 1:
        raise ContractViolation("curves were computed on different datasets")
    rows = []
    for name, c in curves.items():
        m = len(c)
        lo = max(1, math.ceil(low_quantile * m))
        hi = max(1, math.ceil(high_quantile * m))
        acc = c.accuracies
        rows.append(
            {
                "model": name,
                "low_cut": lo,
                "low_accuracy": float(acc[lo - 1]),
                "low_drop": float(acc[:lo].max() - acc[lo - 1]),
                "high_cut": hi,
                "high_accuracy": float(acc[hi - 1]),
                "final_accuracy": float(acc[-1]),
                "high_drop": float(acc[hi - 1] - acc[-1]),
            }
        )
    return rows


def regions_to_csv(rows):
    cols = ["model", "low_cut", "low_accuracy", "low_drop", "high_cut", "high_accuracy", "final_accuracy", "high_drop"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(lines) + "\n"
