"""The three phases: domain adaptation, budget selection + labeling, fine-tuning.

All randomness derives from ``RunConfig.seed`` through ``phase_seed`` so any
phase can be rerun in isolation and reproduce the same artifacts.
"""

import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from lowbudget import analysis, budget, datasets, scoring
from lowbudget import autodiff as ad
from lowbudget import losses
from lowbudget.errors import ContractViolation, DomainError, InvariantError, TrainingDivergence
from lowbudget.network import Domain, Optimizer, build_mlp, save_checkpoint, step_schedule
from lowbudget.perturbation import PROFILES, perturb_batch, profile

log = logging.getLogger(__name__)

PHASES = ("data", "init", "batching", "perturbation", "sampler", "finetune")
UNSUP_LOSSES = ("consistency", "entropy")
# sampler names accepted in configs; composite names also fix the scorer
SAMPLER_ALIASES = {
    "random": (budget.RANDOM, None),
    "uniform": (budget.UNIFORM, None),
    "toprank": (budget.TOPRANK, None),
    "minrank": (budget.MINRANK, None),
    "uniform_entropy": (budget.UNIFORM, scoring.ENTROPY),
    "uniform_consistency": (budget.UNIFORM, scoring.CONSISTENCY),
    "toprank_entropy": (budget.TOPRANK, scoring.ENTROPY),
    "toprank_consistency": (budget.TOPRANK, scoring.CONSISTENCY),
    "minrank_entropy": (budget.MINRANK, scoring.ENTROPY),
    "minrank_consistency": (budget.MINRANK, scoring.CONSISTENCY),
}
MATRIX_SAMPLERS = ("random", "toprank_entropy", "toprank_consistency", "uniform_consistency", "uniform_entropy")
IDENTITY_TOL = 1e-9


def phase_seed(root, phase, *extra):
    """Deterministic 32-bit seed for one phase of a run."""
    ss = np.random.SeedSequence([int(root), PHASES.index(phase), *(int(e) for e in extra)])
    return int(ss.generate_state(1)[0])


@dataclass
class RunConfig:
    lam: float = 1.0
    unsup_loss: str = "consistency"
    epochs_uda: int = 120
    epochs_finetune: int = 50
    batch_size: int = 32
    optimizer: str = "adam"
    lr_uda: float = 1e-3
    lr_finetune: float = 1e-4
    weight_decay: float = 5e-4
    uda_schedule: list = field(default_factory=lambda: [[50, 0.1], [90, 0.1]])
    finetune_schedule: list = field(default_factory=lambda: [[e, 0.1] for e, _ in step_schedule(10, 50)])
    budget_fraction: float = 0.10
    sampler: str = "uniform"
    scorer: str = "entropy"
    consistency_copies: int = 5
    literal_bins: bool = False
    perturb_profile: str = "vectors"
    hidden_dims: list = field(default_factory=lambda: [64, 64])
    use_domain_bn: bool = True
    bn_momentum: float = 0.1
    num_classes: int = 3
    dim: int = 2
    n_per_class: int = 300
    rotation_deg: float = 30.0
    translation: list = None
    noise: float = 0.25
    cluster_std: float = 0.8
    test_fraction: float = 0.5
    finetune_bn: str = "running"
    n_repeats: int = 10
    seed: int = 0

    # -- validation -------------------------------------------------------

    def problems(self):
        """Every violated invariant as ``(field, message)``."""
        out = []

        def bad(name, msg):
            out.append((name, msg))

        if not isinstance(self.lam, (int, float)) or self.lam < 0:
            bad("lambda", "must be a real >= 0")
        if self.unsup_loss not in UNSUP_LOSSES:
            bad("unsup_loss", f"must be one of {list(UNSUP_LOSSES)}")
        for name in ("epochs_uda", "epochs_finetune"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                bad(name, "must be an integer >= 0")
        for name in ("batch_size", "consistency_copies", "n_repeats", "num_classes", "dim", "n_per_class"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                bad(name, "must be a positive integer")
        for name in ("lr_uda", "lr_finetune"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not v > 0:
                bad(name, "must be a positive real")
        if not isinstance(self.weight_decay, (int, float)) or self.weight_decay < 0:
            bad("weight_decay", "must be a real >= 0")
        if self.optimizer not in ("adam", "sgd"):
            bad("optimizer", "must be 'adam' or 'sgd'")
        for name in ("uda_schedule", "finetune_schedule"):
            try:
                pairs = [(int(e), float(f)) for e, f in getattr(self, name)]
            except (TypeError, ValueError):
                bad(name, "must be a list of [epoch, factor] pairs")
                continue
            epochs = [e for e, _ in pairs]
            if any(b <= a for a, b in zip(epochs, epochs[1:])):
                bad(name, "epochs must be strictly increasing")
            if any(f <= 0 for _, f in pairs):
                bad(name, "factors must be positive")
        if not isinstance(self.budget_fraction, (int, float)) or not 0 < self.budget_fraction <= 1:
            bad("budget_fraction", "must lie in (0, 1]")
        if self.sampler not in SAMPLER_ALIASES:
            bad("sampler", f"unknown sampler {self.sampler!r}; valid strategies: {', '.join(MATRIX_SAMPLERS)}"
                f" (also {', '.join(s for s in SAMPLER_ALIASES if s not in MATRIX_SAMPLERS)})")
        if self.scorer not in scoring.SCORER_KINDS:
            bad("scorer", f"must be one of {list(scoring.SCORER_KINDS)}")
        if self.perturb_profile not in PROFILES:
            bad("perturb_profile", f"must be one of {sorted(PROFILES)}")
        if not isinstance(self.hidden_dims, (list, tuple)) or any(
            not isinstance(h, int) or h < 1 for h in self.hidden_dims
        ):
            bad("hidden_dims", "must be a list of positive integers")
        if not isinstance(self.bn_momentum, (int, float)) or not 0 < self.bn_momentum < 1:
            bad("bn_momentum", "must lie in (0, 1)")
        if isinstance(self.num_classes, int) and self.num_classes < 2:
            bad("num_classes", "must be >= 2")
        if isinstance(self.dim, int) and self.dim < 2:
            bad("dim", "must be >= 2")
        if not isinstance(self.test_fraction, (int, float)) or not 0 < self.test_fraction < 1:
            bad("test_fraction", "must lie in (0, 1)")
        if isinstance(self.n_per_class, int) and self.n_per_class < 10:
            bad("n_per_class", "must be >= 10")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ContractViolation("; ".join(f"{k}: {m}" for k, m in problems))
        return self

    # -- derived ----------------------------------------------------------

    @property
    def strategy(self):
        return SAMPLER_ALIASES[self.sampler][0]

    @property
    def scorer_kind(self):
        return SAMPLER_ALIASES[self.sampler][1] or self.scorer

    @property
    def model_label(self):
        if self.lam == 0:
            return "Source only"
        return "AutoDIAL-variant" if self.unsup_loss == "entropy" else "CoDIAL"

    @property
    def sampler_label(self):
        if self.strategy == budget.RANDOM:
            return "Random"
        return f"{self.strategy.capitalize()} {self.scorer_kind.capitalize()}"

    @property
    def stochastic_sampler(self):
        return self.strategy == budget.RANDOM or self.scorer_kind == scoring.CONSISTENCY

    def budget_k(self, m):
        return max(1, math.floor(self.budget_fraction * m))

    def perturb_config(self, repeat=0):
        return profile(self.perturb_profile, phase_seed(self.seed, "perturbation", repeat))

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, raw):
        """Build from a flat mapping; unknown keys raise ``ContractViolation``."""
        raw = dict(raw)
        if "lambda" in raw:
            raw["lam"] = raw.pop("lambda")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ContractViolation(f"unknown config keys: {unknown}")
        return cls(**raw)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def make_data(config):
    return datasets.gen_two_domain_gaussians(
        num_classes=config.num_classes,
        dim=config.dim,
        n_per_class=config.n_per_class,
        rotation_deg=config.rotation_deg,
        translation=config.translation,
        noise=config.noise,
        cluster_std=config.cluster_std,
        test_fraction=config.test_fraction,
        seed=phase_seed(config.seed, "data"),
    )


def new_model(config, input_dim):
    return build_mlp(
        input_dim,
        list(config.hidden_dims),
        config.num_classes,
        use_domain_bn=config.use_domain_bn,
        seed=phase_seed(config.seed, "init"),
        bn_momentum=config.bn_momentum,
    )


# ---------------------------------------------------------------------------
# phase 1: adaptation
# ---------------------------------------------------------------------------


def _mean(xs):
    return math.fsum(xs) / len(xs) if xs else None


def train_uda(config, source, target, model=None):
    """Minimize ``L_s + lambda * L_u`` over paired source/target batches.

    Returns ``(model, record)`` where ``record`` holds per-epoch means of every
    loss component. With ``lambda == 0`` no target batch is touched, which is
    exactly supervised training on the source.
    """
    config.validate()
    if not source.labeled:
        raise ContractViolation("source dataset must be labeled")
    if source.num_classes != target.num_classes or source.num_classes != config.num_classes:
        raise ContractViolation("source, target and config disagree on the class count")
    if model is None:
        model = new_model(config, source.feature_dim)
    opt = Optimizer(
        model.parameters(),
        config.optimizer,
        config.lr_uda,
        config.weight_decay,
        config.uda_schedule,
    )
    pcfg = config.perturb_config()
    batch_seed = phase_seed(config.seed, "batching")
    adapt = config.lam > 0
    epochs = []
    step = 0
    for epoch in range(config.epochs_uda):
        lr = opt.apply_schedule(epoch)
        src_batches = datasets.make_batches(source, config.batch_size, batch_seed, epoch)
        tgt_batches = datasets.make_batches(target, config.batch_size, batch_seed + 1, epoch) if adapt else []
        n_steps = max(len(src_batches), len(tgt_batches))
        comp = {"L_s": [], "L_e": [], "L_c": [], "L_u": [], "total": []}
        worst = 0.0
        for b in range(n_steps):
            sb = src_batches[b % len(src_batches)]
            try:
                opt.zero_grad()
                ps = model.forward(source.X[sb], Domain.SOURCE, training=True)
                l_s = losses.supervised_loss(ps, source.labels[sb])
                if adapt:
                    tb = tgt_batches[b % len(tgt_batches)]
                    xt = target.X[tb]
                    xp = perturb_batch(xt, target.ids[tb], pcfg, 0, epoch, b)
                    pt = model.forward(xt, Domain.TARGET, training=True)
                    qt = model.forward(xp, Domain.TARGET_PERTURBED, training=True)
                    l_e = losses.entropy_loss(pt)
                    l_c = losses.consistency_loss(pt, qt)
                    l_u = losses.unsupervised_loss(pt, qt)
                    objective = l_u if config.unsup_loss == "consistency" else l_e
                    total = losses.total_loss(l_s, objective, config.lam)
                else:
                    total = losses.total_loss(l_s, None, 0.0)
                value = total.item()
                if not math.isfinite(value):
                    raise TrainingDivergence(f"non-finite loss at step {step}", step)
                ad.backward(total)
                opt.step()
            except DomainError as exc:
                raise TrainingDivergence(f"training diverged at step {step}: {exc}", step) from exc
            comp["L_s"].append(l_s.item())
            comp["total"].append(value)
            if adapt:
                e, c, u = l_e.item(), l_c.item(), l_u.item()
                dev = abs(u - (e + c))
                if dev > IDENTITY_TOL:
                    raise InvariantError(f"L_u != L_e + L_c at step {step} (|diff| = {dev:.3e})")
                worst = max(worst, dev)
                comp["L_e"].append(e)
                comp["L_c"].append(c)
                comp["L_u"].append(u)
            step += 1
        row = {"epoch": epoch, "lr": lr, "steps": n_steps}
        row.update({k: _mean(v) for k, v in comp.items()})
        row["identity_max_dev"] = worst if adapt else None
        epochs.append(row)
    record = {"epochs": epochs, "steps": step, "fingerprint": model.fingerprint()}
    return model, record


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(model, dataset, domain=Domain.TARGET):
    """Fraction of argmax-correct predictions; argmax ties go to the lower class."""
    if not dataset.labeled:
        raise ContractViolation("evaluation needs labels")
    if len(dataset) == 0:
        raise ContractViolation("cannot evaluate on an empty dataset")
    probs = model.predict(dataset.X, domain)
    return float(np.mean(probs.argmax(axis=1) == dataset.labels))


# ---------------------------------------------------------------------------
# phase 2: selection
# ---------------------------------------------------------------------------


def run_selection(model, target, config, repeat=0, out_dir=None):
    """Score the target training set and pick ``k = floor(fraction * |T|)`` samples."""
    kind = config.scorer_kind
    pcfg = config.perturb_config(repeat) if kind == scoring.CONSISTENCY else None
    table = scoring.score_dataset(model, target, kind, pcfg, config.consistency_copies)
    k = config.budget_k(len(target))
    sel = budget.select(
        table,
        config.strategy,
        k,
        seed=phase_seed(config.seed, "sampler", repeat),
        literal_bins=config.literal_bins,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        table.save(out_dir / "scores.csv")
        sel.save(out_dir / "selection.csv")
    return table, sel


# ---------------------------------------------------------------------------
# phase 3: fine-tuning
# ---------------------------------------------------------------------------


def finetune(model, pool, config, eval_set=None, repeat=0):
    """Supervised fine-tuning of a copy of ``model`` on the labeled pool (TARGET branch)."""
    if len(pool) == 0:
        raise ContractViolation("fine-tuning pool is empty")
    if not pool.labeled:
        raise ContractViolation("fine-tuning pool must be labeled")
    model = model.copy()
    opt = Optimizer(
        model.parameters(),
        config.optimizer,
        config.lr_finetune,
        config.weight_decay,
        config.finetune_schedule,
    )
    batch_seed = phase_seed(config.seed, "finetune", repeat)
    epochs = []
    step = 0
    for epoch in range(config.epochs_finetune):
        lr = opt.apply_schedule(epoch)
        batch_losses = []
        for idx in datasets.make_batches(pool, config.batch_size, batch_seed, epoch):
            try:
                opt.zero_grad()
                probs = model.forward(pool.X[idx], Domain.TARGET, training=config.finetune_bn == "batch")
                loss = losses.supervised_loss(probs, pool.labels[idx])
                if not math.isfinite(loss.item()):
                    raise TrainingDivergence(f"non-finite fine-tuning loss at step {step}", step)
                ad.backward(loss)
                opt.step()
            except DomainError as exc:
                raise TrainingDivergence(f"fine-tuning diverged at step {step}: {exc}", step) from exc
            batch_losses.append(loss.item())
            step += 1
        row = {"epoch": epoch, "lr": lr, "L_s": _mean(batch_losses)}
        if eval_set is not None:
            row["target_test_accuracy"] = evaluate(model, eval_set, Domain.TARGET)
        epochs.append(row)
    return model, {"epochs": epochs, "steps": step, "fingerprint": model.fingerprint()}


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def results_csv(rows):
    cols = ["model", "sampler", "k", "uda_target_accuracy", "finetune_target_accuracy", "oracle_queries"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(lines) + "\n"


def seed_lineage(config, repeat=0):
    return {phase: phase_seed(config.seed, phase, *((repeat,) if phase in ("sampler", "finetune") else ()))
            for phase in PHASES} | {"root": config.seed, "repeat": repeat}


def run_all(config, out_dir=None, uda=None, repeat=0):
    """Adapt, select, query and fine-tune; returns ``(run_record, results_row)``.

    ``uda`` may pass a pre-trained ``(model, uda_record)`` for the same config
    and data. When ``out_dir`` is given every artifact is written there.
    """
    config.validate()
    t0 = time.perf_counter()
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.resolved.json", config.to_dict())
    source, target, target_test, oracle = make_data(config)
    if uda is None:
        model, uda_record = train_uda(config, source, target)
    else:
        model, uda_record = uda
    uda_acc = {
        "source": evaluate(model, source, Domain.SOURCE),
        "target_test": evaluate(model, target_test, Domain.TARGET),
    }
    table, sel = run_selection(model, target, config, repeat, out)
    pool = datasets.query_labels(oracle, sel, target)
    ft_model, ft_record = finetune(model, pool, config, target_test, repeat)
    ft_acc = evaluate(ft_model, target_test, Domain.TARGET)

    record = {
        "config": config.to_dict(),
        "seed_lineage": seed_lineage(config, repeat),
        "uda": uda_record,
        "selection": {
            "strategy": sel.strategy,
            "scorer_kind": sel.scorer_kind,
            "k": sel.k,
            "score_table_hash": table.digest(),
            "selection_hash": budget.selection_digest(sel),
        },
        "finetune": ft_record,
        "accuracies": {"uda": uda_acc, "finetune": {"target_test": ft_acc}},
        "oracle_queries": oracle.query_count,
        "checkpoints": {"uda": model.fingerprint(), "finetune": ft_model.fingerprint()},
    }
    row = {
        "model": config.model_label,
        "sampler": config.sampler_label,
        "k": sel.k,
        "uda_target_accuracy": uda_acc["target_test"],
        "finetune_target_accuracy": ft_acc,
        "oracle_queries": oracle.query_count,
    }
    if out is not None:
        datasets.save_csv(source, out / "source.csv")
        datasets.save_csv(target, out / "target.csv")
        datasets.save_csv(target_test, out / "target_test.csv")
        oracle.save(out / "oracle.json")
        save_checkpoint(model, out / "model_uda.npz", seed_lineage(config))
        save_checkpoint(ft_model, out / "model_finetuned.npz", seed_lineage(config, repeat))
        datasets.save_csv(pool, out / "pool.csv")
        curve = analysis.entropy_accuracy_curve(model, target_test)
        (out / "curve.csv").write_text(curve.to_csv())
        (out / "histogram.csv").write_text(analysis.selection_histogram(table, sel).to_csv())
        write_json(out / "run_record.json", record)
        (out / "results.csv").write_text(results_csv([row]))
        write_json(out / "timing.json", {"wall_clock_seconds": time.perf_counter() - t0})
    return record, row


def _uda_key(config):
    d = config.to_dict()
    for k in ("sampler", "scorer", "budget_fraction", "consistency_copies", "literal_bins", "epochs_finetune",
              "lr_finetune", "finetune_schedule", "n_repeats"):
        d.pop(k)
    return json.dumps(d, sort_keys=True)


def matrix_configs(base, lambdas=None):
    """The model x sampler grid: Source only, AutoDIAL-variant, CoDIAL by the five samplers."""
    lam = base.lam if base.lam > 0 else 1.0
    models = [replace(base, lam=0.0), replace(base, lam=lam, unsup_loss="entropy"),
              replace(base, lam=lam, unsup_loss="consistency")]
    return [replace(m, sampler=s) for m in models for s in MATRIX_SAMPLERS]


def run_matrix(configs, task="synthetic", workers=1):
    """Mean and sample standard deviation of fine-tuned accuracy for each config.

    Stochastic samplers (Random and any consistency-scored one) run
    ``n_repeats`` times on the same adapted model; deterministic ones run once.
    """
    if not configs:
        raise ContractViolation("run_matrix needs at least one config")
    cache = {}

    def one(config):
        key = _uda_key(config)
        if key not in cache:
            source, target, _, _ = make_data(config)
            cache[key] = train_uda(config, source, target)
        repeats = config.n_repeats if config.stochastic_sampler else 1
        accs = [run_all(config, uda=cache[key], repeat=r)[1]["finetune_target_accuracy"] for r in range(repeats)]
        return {
            "model": config.model_label,
            "sampler": config.sampler_label,
            "task": task,
            "n": repeats,
            "mean": statistics.fmean(accs),
            "std": statistics.stdev(accs) if repeats > 1 else None,
            "accuracies": accs,
        }

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_matrix_worker, [(c, task) for c in configs]))
    return [one(c) for c in configs]


def _matrix_worker(args):
    config, task = args
    return run_matrix([config], task)[0]


def matrix_csv(rows):
    """Table laid out as rows model x sampler, one column group per task."""
    tasks = sorted({r["task"] for r in rows})
    with_std = any(r["std"] is not None for r in rows)
    cols = ["model", "sampler", "n"]
    for t in tasks:
        cols += [f"{t}_mean"] + ([f"{t}_std"] if with_std else [])
    lines = [",".join(cols)]
    keyed = {}
    for r in rows:
        keyed.setdefault((r["model"], r["sampler"]), {})[r["task"]] = r
    for (model, sampler), by_task in keyed.items():
        n = max(r["n"] for r in by_task.values())
        cells = [model, sampler, str(n)]
        for t in tasks:
            r = by_task.get(t)
            cells.append("" if r is None else f"{100 * r['mean']:.2f}")
            if with_std:
                cells.append("" if r is None or r["std"] is None else f"{100 * r['std']:.2f}")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
