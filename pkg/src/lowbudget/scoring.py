"""Per-sample difficulty scores over the target set."""

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from lowbudget.errors import ContractViolation, DataError, FormatError
from lowbudget.losses import PROB_FLOOR
from lowbudget.network import Domain
from lowbudget.perturbation import perturb_batch

ENTROPY = "entropy"
CONSISTENCY = "consistency"
SCORER_KINDS = (ENTROPY, CONSISTENCY)

# stream salt separating scoring perturbations from training perturbations
SCORING_SALT = 1


@dataclass(frozen=True, eq=False)
class ScoreTable:
    ids: np.ndarray
    scores: np.ndarray
    kind: str
    fingerprint: str = ""
    seed: int = None

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        scores = np.asarray(self.scores, dtype=np.float64)
        if ids.shape != scores.shape or ids.ndim != 1:
            raise ContractViolation("ids and scores must be 1-D and equally long")
        if np.isnan(scores).any():
            raise DataError("score table contains NaN")
        if not np.isfinite(scores).all() or (scores < 0).any():
            raise DataError("scores must be finite and non-negative")
        order = np.argsort(ids, kind="stable")
        ids, scores = ids[order], scores[order]
        if ids.size > 1 and (np.diff(ids) == 0).any():
            raise ContractViolation("sample ids must be unique")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "scores", scores)

    def __len__(self):
        return self.ids.shape[0]

    def as_dict(self):
        return dict(zip(self.ids.tolist(), self.scores.tolist()))

    def to_csv(self):
        lines = ["sample_id,score"]
        lines += [f"{i},{s!r}" for i, s in zip(self.ids.tolist(), self.scores.tolist())]
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.to_csv().encode()).hexdigest()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv())
        meta = {"scorer_kind": self.kind, "seed": self.seed, "checkpoint_hash": self.fingerprint}
        with open(_meta_path(path), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != "sample_id,score":
            raise FormatError(f"{path}: expected header 'sample_id,score' at line 1")
        try:
            pairs = [line.split(",") for line in lines[1:] if line]
            ids = [int(a) for a, _ in pairs]
            scores = [float(b) for _, b in pairs]
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
        try:
            with open(_meta_path(path)) as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            meta = {}
        return cls(ids, scores, meta.get("scorer_kind", ENTROPY), meta.get("checkpoint_hash", ""), meta.get("seed"))


def _meta_path(path):
    return str(path) + ".meta.json"


def _row_entropy(p):
    h = -(p * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=1)
    return np.clip(h, 0.0, math.log(p.shape[1])) + 0.0


def _row_kl(p, q):
    kl = (p * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR)))).sum(axis=1)
    return np.maximum(kl, 0.0) + 0.0


def entropy_score(model, sample):
    """Entropy of the eval-mode TARGET prediction for one sample."""
    p = model.predict(np.asarray(sample, dtype=np.float64)[None], Domain.TARGET)
    return float(_row_entropy(p)[0])


def consistency_score(model, sample, config, copies=5, sample_id=0):
    """Mean KL between the pristine prediction and ``copies`` perturbed predictions.

    Copy ``j`` is drawn from the stream ``(config.seed, SCORING_SALT, j, sample_id)``.
    """
    if copies < 1:
        raise ContractViolation("need at least one perturbed copy")
    x = np.asarray(sample, dtype=np.float64)[None]
    return float(_consistency_rows(model, x, np.array([sample_id]), config, copies)[0])


def _consistency_rows(model, X, ids, config, copies):
    p = model.predict(X, Domain.TARGET)
    total = np.zeros(X.shape[0])
    for j in range(copies):
        xp = perturb_batch(X, ids, config, SCORING_SALT, j)
        total += _row_kl(p, model.predict(xp, Domain.TARGET_PERTURBED))
    return total / copies


def score_dataset(model, dataset, kind=ENTROPY, config=None, copies=5):
    """Score every sample of ``dataset``; labels, if any, are ignored."""
    if len(dataset) == 0:
        raise ContractViolation("cannot score an empty dataset")
    if kind == ENTROPY:
        scores = _row_entropy(model.predict(dataset.X, Domain.TARGET))
        seed = None
    elif kind == CONSISTENCY:
        if config is None:
            raise ContractViolation("consistency scoring needs a perturbation config")
        if copies < 1:
            raise ContractViolation("need at least one perturbed copy")
        scores = _consistency_rows(model, dataset.X, dataset.ids, config, copies)
        seed = config.seed
    else:
        raise ContractViolation(f"unknown scorer kind {kind!r}; choose from {SCORER_KINDS}")
    return ScoreTable(dataset.ids, scores, kind, model.fingerprint(), seed)
