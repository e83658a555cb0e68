"""Budget sample selection strategies.

``select_uniform`` spreads the budget over the whole score range: samples are
binned by normalized score into ``k`` equal-width bins, and each pass takes the
highest-scoring unselected sample of every bin, emitting them in decreasing
score order until ``k`` samples are chosen. Bin indices are computed as
``floor(k * ((s - s_min) / (s_max - s_min))) + 1`` and clamped to ``k`` so the
maximum-score sample stays selectable; ``literal_bins=True`` drops the clamp.

Equal scores are resolved by the lower sample id in every strategy.
"""

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from lowbudget import _kernels
from lowbudget.errors import ContractViolation, DataError, FormatError

UNIFORM = "uniform"
RANDOM = "random"
TOPRANK = "toprank"
MINRANK = "minrank"
STRATEGIES = (UNIFORM, RANDOM, TOPRANK, MINRANK)


@dataclass(frozen=True)
class BudgetSelection:
    selected_ids: tuple
    strategy: str
    scorer_kind: str
    k: int
    seed: int = None
    scores: tuple = ()
    table_hash: str = ""

    def __post_init__(self):
        ids = tuple(int(i) for i in self.selected_ids)
        if len(ids) != self.k:
            raise ContractViolation(f"selection has {len(ids)} ids but k={self.k}")
        if len(set(ids)) != len(ids):
            raise ContractViolation("selection contains duplicate ids")
        object.__setattr__(self, "selected_ids", ids)
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))

    def to_csv(self):
        lines = ["rank,sample_id,score"]
        for rank, sid in enumerate(self.selected_ids, start=1):
            score = repr(self.scores[rank - 1]) if self.scores else ""
            lines.append(f"{rank},{sid},{score}")
        return "\n".join(lines) + "\n"

    def metadata(self):
        return {
            "strategy": self.strategy,
            "scorer_kind": self.scorer_kind,
            "k": self.k,
            "seed": self.seed,
            "score_table_hash": self.table_hash,
        }

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv())
        with open(str(path) + ".meta.json", "w") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != "rank,sample_id,score":
            raise FormatError(f"{path}: expected header 'rank,sample_id,score' at line 1")
        ids, scores = [], []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split(",")
            if len(parts) != 3:
                raise FormatError(f"{path}: malformed row at line {lineno}")
            ids.append(int(parts[1]))
            if parts[2]:
                scores.append(float(parts[2]))
        with open(str(path) + ".meta.json") as fh:
            meta = json.load(fh)
        return cls(
            tuple(ids),
            meta["strategy"],
            meta["scorer_kind"],
            meta["k"],
            meta.get("seed"),
            tuple(scores) if len(scores) == len(ids) else (),
            meta.get("score_table_hash", ""),
        )


def _check_k(k, m):
    if not isinstance(k, (int, np.integer)) or k < 1 or k > m:
        raise ContractViolation(f"budget k={k} must satisfy 1 <= k <= {m}")


def _table_hash(table):
    return table.digest() if hasattr(table, "digest") else ""


def _finish(table, positions, strategy, k, seed=None):
    return BudgetSelection(
        tuple(table.ids[positions].tolist()),
        strategy,
        table.kind,
        k,
        seed,
        tuple(table.scores[positions].tolist()),
        _table_hash(table),
    )


def uniform_bins(scores, k, literal_bins=False):
    """1-based bin index of every score; all ones when the scores are constant."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise DataError("NaN score")
    s_min, s_max = scores.min(), scores.max()
    if s_max == s_min:
        return np.ones(scores.shape[0], dtype=np.int64)
    bins = np.floor(k * ((scores - s_min) / (s_max - s_min))).astype(np.int64) + 1
    return bins if literal_bins else np.minimum(bins, k)


def select_uniform(table, k, literal_bins=False):
    m = len(table)
    _check_k(k, m)
    bins = uniform_bins(table.scores, k, literal_bins)
    order = _kernels.uniform_order(table.scores, bins, int(k))
    if order.shape[0] < k:
        raise DataError(f"only {order.shape[0]} samples fall in bins 1..{k}; cannot fill a budget of {k}")
    return _finish(table, order, UNIFORM, int(k))


def select_toprank(table, k):
    _check_k(k, len(table))
    order = np.lexsort((table.ids, -table.scores))[:k]
    return _finish(table, order, TOPRANK, int(k))


def select_minrank(table, k):
    _check_k(k, len(table))
    order = np.lexsort((table.ids, table.scores))[:k]
    return _finish(table, order, MINRANK, int(k))


def select_random(ids, k, seed, table=None):
    """Uniform draw without replacement; ``table`` only supplies scores for the record."""
    ids = np.asarray(ids, dtype=np.int64)
    _check_k(k, ids.shape[0])
    picked = np.random.default_rng(seed).choice(ids, size=int(k), replace=False)
    if table is None:
        return BudgetSelection(tuple(picked.tolist()), RANDOM, "", int(k), seed)
    return _finish(table, table_positions(table, picked), RANDOM, int(k), seed)


def table_positions(table, ids):
    pos = np.searchsorted(table.ids, ids)
    if (pos >= len(table)).any() or (table.ids[np.minimum(pos, len(table) - 1)] != ids).any():
        raise ContractViolation("selected id missing from score table")
    return pos


def select(table, strategy, k, seed=None, literal_bins=False):
    if strategy == UNIFORM:
        return select_uniform(table, k, literal_bins)
    if strategy == TOPRANK:
        return select_toprank(table, k)
    if strategy == MINRANK:
        return select_minrank(table, k)
    if strategy == RANDOM:
        return select_random(table.ids, k, seed, table)
    raise ContractViolation(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


def reference_uniform_oracle(table, k, literal_bins=False):
    """Line-by-line transcription of the binned selection with plain scans.

    Kept free of numpy and of the helpers above so it can serve as an
    independent check of ``select_uniform``.
    """
    ids = [int(i) for i in table.ids]
    s = [float(v) for v in table.scores]
    m = len(s)
    if not isinstance(k, (int, np.integer)) or k < 1 or k > m:
        raise ContractViolation(f"budget k={k} must satisfy 1 <= k <= {m}")
    if any(v != v for v in s):
        raise DataError("NaN score")
    k = int(k)

    s_min = min(s)
    s_max = max(s)
    b = []
    for i in range(m):
        if s_max == s_min:
            b.append(1)
            continue
        bi = math.floor(k * ((s[i] - s_min) / (s_max - s_min))) + 1
        b.append(bi if literal_bins else min(bi, k))

    members = {j: [i for i in range(m) if b[i] == j] for j in range(1, k + 1)}
    chosen = []
    taken = [False] * m
    while len(chosen) < k:
        queue = []
        for j in range(1, k + 1):
            max_j = -1
            s_max_j = -math.inf
            for i in members[j]:
                if s[i] > s_max_j and not taken[i]:
                    max_j = i
                    s_max_j = s[i]
            if max_j >= 0:
                queue.append((s_max_j, max_j))
        if not queue:
            raise DataError(f"only {len(chosen)} samples fall in bins 1..{k}; cannot fill a budget of {k}")
        while len(chosen) < k and queue:
            best = 0
            for q in range(1, len(queue)):
                sq, iq = queue[q]
                sb, ib = queue[best]
                if sq > sb or (sq == sb and ids[iq] < ids[ib]):
                    best = q
            _, i = queue.pop(best)
            chosen.append(i)
            taken[i] = True

    return BudgetSelection(
        tuple(ids[i] for i in chosen),
        UNIFORM,
        table.kind,
        k,
        None,
        tuple(s[i] for i in chosen),
        _table_hash(table),
    )


def selection_digest(selection):
    return hashlib.sha256(selection.to_csv().encode()).hexdigest()
