import json
import statistics
from dataclasses import replace

import numpy as np
import pytest

from lowbudget import autodiff as ad
from lowbudget import datasets, losses
from lowbudget.analysis import compare_regions, entropy_accuracy_curve
from lowbudget.datasets import Dataset
from lowbudget.errors import ContractViolation, TrainingDivergence
from lowbudget.network import Domain, Optimizer, build_mlp
from lowbudget.pipeline import (
    MATRIX_SAMPLERS,
    RunConfig,
    evaluate,
    finetune,
    make_data,
    matrix_configs,
    matrix_csv,
    new_model,
    phase_seed,
    run_all,
    run_matrix,
    run_selection,
    train_uda,
)

TINY = dict(n_per_class=20, epochs_uda=2, epochs_finetune=2, hidden_dims=[8], n_repeats=3)


def tiny(**kw):
    return replace(RunConfig(), **{**TINY, **kw})


def test_defaults():
    d = RunConfig().to_dict()
    assert d["lambda"] == 1.0
    assert (d["epochs_uda"], d["epochs_finetune"], d["batch_size"]) == (120, 50, 32)
    assert (d["lr_uda"], d["lr_finetune"], d["weight_decay"]) == (1e-3, 1e-4, 5e-4)
    assert d["uda_schedule"] == [[50, 0.1], [90, 0.1]]
    assert d["finetune_schedule"] == [[10, 0.1], [20, 0.1], [30, 0.1], [40, 0.1]]
    assert d["budget_fraction"] == 0.10
    assert RunConfig.from_dict(d) == RunConfig()


def test_budget_size():
    assert RunConfig().budget_k(900) == 90
    assert RunConfig(budget_fraction=0.01).budget_k(900) == 9


def test_config_diagnostics():
    problems = dict(RunConfig(budget_fraction=1.5).problems())
    assert "(0, 1]" in problems["budget_fraction"]
    msg = dict(RunConfig(sampler="best").problems())["sampler"]
    assert all(name in msg for name in MATRIX_SAMPLERS)
    with pytest.raises(ContractViolation):
        RunConfig.from_dict({"lamda": 1.0})


def test_phase_seeds_are_distinct():
    seeds = {phase_seed(0, p) for p in ("data", "init", "batching", "perturbation", "sampler", "finetune")}
    assert len(seeds) == 6
    assert phase_seed(3, "sampler", 1) != phase_seed(3, "sampler", 2)


def test_lambda_zero_equals_plain_supervised_training():
    config = tiny(lam=0.0, epochs_uda=3)
    source, target, _, _ = make_data(config)
    model, record = train_uda(config, source, target)

    ref = new_model(config, source.feature_dim)
    opt = Optimizer(ref.parameters(), "adam", config.lr_uda, config.weight_decay, config.uda_schedule)
    seed = phase_seed(config.seed, "batching")
    for epoch in range(config.epochs_uda):
        opt.apply_schedule(epoch)
        for idx in datasets.make_batches(source, config.batch_size, seed, epoch):
            opt.zero_grad()
            ad.backward(losses.supervised_loss(ref.forward(source.X[idx], Domain.SOURCE, True), source.labels[idx]))
            opt.step()
    assert ref.fingerprint() == model.fingerprint() == record["fingerprint"]


def test_training_records_identity_and_components():
    config = tiny()
    source, target, _, _ = make_data(config)
    _, record = train_uda(config, source, target)
    for row in record["epochs"]:
        assert row["identity_max_dev"] <= 1e-9
        assert abs(row["L_u"] - row["L_e"] - row["L_c"]) <= 1e-9


def test_entropy_variant_runs():
    config = tiny(unsup_loss="entropy")
    source, target, _, _ = make_data(config)
    model, _ = train_uda(config, source, target)
    assert RunConfig(unsup_loss="entropy").model_label == "AutoDIAL-variant"
    assert model.fingerprint() != train_uda(tiny(), source, target)[0].fingerprint()


def test_class_count_mismatch():
    config = tiny()
    source, target, _, _ = make_data(config)
    with pytest.raises(ContractViolation):
        train_uda(replace(config, num_classes=4), source, target)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_the_step():
    config = tiny(lr_uda=1e200, optimizer="sgd", weight_decay=0.0)
    source, target, _, _ = make_data(config)
    with pytest.raises(TrainingDivergence) as info:
        train_uda(config, source, target)
    assert info.value.step >= 0 and f"step {info.value.step}" in str(info.value)


def test_zero_finetune_epochs_keep_the_model():
    config = tiny(epochs_finetune=0)
    source, target, test, oracle = make_data(config)
    model, _ = train_uda(config, source, target)
    _, sel = run_selection(model, target, config)
    pool = datasets.query_labels(oracle, sel, target)
    tuned, _ = finetune(model, pool, config, test)
    assert tuned.fingerprint() == model.fingerprint()
    assert evaluate(tuned, test) == evaluate(model, test)


def test_finetune_needs_a_labeled_pool():
    config = tiny()
    source, target, _, _ = make_data(config)
    model = new_model(config, 2)
    with pytest.raises(ContractViolation):
        finetune(model, source.take([]), config)
    with pytest.raises(ContractViolation):
        finetune(model, target, config)


def test_finetune_does_not_modify_the_input_model():
    config = tiny()
    source, target, test, oracle = make_data(config)
    model, _ = train_uda(config, source, target)
    fp = model.fingerprint()
    _, sel = run_selection(model, target, config)
    finetune(model, datasets.query_labels(oracle, sel, target), config, test)
    assert model.fingerprint() == fp


def test_selection_is_deterministic():
    config = tiny()
    source, target, _, _ = make_data(config)
    model, _ = train_uda(config, source, target)
    a = run_selection(model, target, config)[1]
    b = run_selection(model, target, config)[1]
    assert a == b and a.k == config.budget_k(len(target))


def test_evaluate():
    model = build_mlp(2, [], 2, seed=0)
    model.layers[0].weight.data[:] = 0.0
    model.layers[0].bias.data[:] = [5.0, -5.0]
    r = np.random.default_rng(0)
    perfect = Dataset(r.normal(size=(50, 2)), np.arange(50), 2, np.zeros(50, int))
    assert evaluate(model, perfect) == 1.0
    coin = Dataset(r.normal(size=(10_000, 2)), np.arange(10_000), 2, r.integers(0, 2, 10_000))
    assert abs(evaluate(model, coin) - 0.5) <= 0.02
    with pytest.raises(ContractViolation):
        evaluate(model, coin.unlabeled())


def test_run_all_accounting_and_artifacts(tmp_path):
    config = tiny(budget_fraction=0.05)
    record, row = run_all(config, tmp_path)
    k = int(0.05 * 60)
    assert row["k"] == k == record["oracle_queries"]
    oracle = datasets.LabelOracle.load(tmp_path / "oracle.json")
    assert oracle.query_count == k
    for name in ("model_uda.npz", "model_finetuned.npz", "curve.csv", "histogram.csv", "results.csv", "pool.csv"):
        assert (tmp_path / name).exists()
    saved = json.loads((tmp_path / "run_record.json").read_text())
    assert saved["seed_lineage"]["root"] == config.seed
    assert "wall_clock_seconds" not in json.dumps(saved)


def test_matrix_tables():
    det = run_matrix([tiny(sampler="uniform_entropy")])
    assert det[0]["n"] == 1 and det[0]["std"] is None
    assert matrix_csv(det).splitlines()[0] == "model,sampler,n,synthetic_mean"
    rnd = run_matrix([tiny(sampler="random")])[0]
    assert rnd["n"] == 3 and len(rnd["accuracies"]) == 3
    assert rnd["std"] == pytest.approx(statistics.stdev(rnd["accuracies"]))
    grid = matrix_configs(tiny())
    assert len(grid) == 15
    assert {c.model_label for c in grid} == {"Source only", "AutoDIAL-variant", "CoDIAL"}


@pytest.mark.slow
def test_full_budget_approaches_target_only(uda_cache):
    run = uda_cache.get(0, 1.0)
    _, target, test, oracle = run["data"]
    model, _ = run["uda"]
    config = replace(run["config"], sampler="random", budget_fraction=1.0)
    _, sel = run_selection(model, target, config)
    tuned, _ = finetune(model, datasets.query_labels(oracle, sel, target), config, test)
    assert evaluate(tuned, test) >= evaluate(model, test) - 0.005


@pytest.mark.slow
def test_adaptation_keeps_the_confident_region_accurate(uda_cache):
    codial, source_only = [], []
    for seed in range(5):
        for lam, bucket in ((1.0, codial), (0.0, source_only)):
            run = uda_cache.get(seed, lam)
            curve = entropy_accuracy_curve(run["uda"][0], run["data"][2])
            bucket.append(compare_regions({"m": curve})[0]["low_drop"])
    assert np.mean(codial) <= np.mean(source_only)
