"""Command-line entry point.

Every subcommand reads an optional flat JSON config, applies flag overrides
(one flag per config key), writes ``config.resolved.json`` into the output
directory and then runs its phase. Phases communicate only through files in
the output directory, so ``adapt``, ``select`` and ``finetune`` run one by one
produce the same artifacts as ``run-all``.

Errors print one JSON line on stderr and exit with:
2 config error, 3 missing or unreadable input, 4 training divergence,
5 contract violation.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from lowbudget import analysis, budget, datasets, pipeline, scoring
from lowbudget.errors import ContractViolation, DataError, DomainError, FormatError, TrainingDivergence
from lowbudget.network import Domain, load_checkpoint, save_checkpoint
from lowbudget.pipeline import RunConfig

log = logging.getLogger("lowbudget")

OUTPUT_ENV = "LOWBUDGET_OUTPUT_DIR"
EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED, EXIT_CONTRACT = 2, 3, 4, 5


class ConfigError(Exception):
    def __init__(self, diagnostics):
        super().__init__("; ".join(f"{k}: {m}" for k, m in diagnostics))
        self.diagnostics = diagnostics


class MissingInput(Exception):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def _config_key(name):
    return "lambda" if name == "lam" else name


def validate_config(path=None, overrides=None):
    """Resolve a config file plus overrides; return ``(config, diagnostics)``.

    ``config`` is ``None`` whenever ``diagnostics`` is non-empty. All problems
    are reported, each with the offending key.
    """
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise MissingInput(f"config file not found: {path}") from None
        try:
            raw = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            return None, [("<file>", f"not valid JSON: {exc}")]
        if not isinstance(raw, dict):
            return None, [("<file>", "top level must be an object of key/value pairs")]
    raw.update(overrides or {})
    known = {_config_key(f.name) for f in fields(RunConfig)} | {"lam"}
    diagnostics = [(k, "unknown key") for k in sorted(set(raw) - known)]
    try:
        config = RunConfig.from_dict({k: v for k, v in raw.items() if k in known})
    except TypeError as exc:
        return None, diagnostics + [("<file>", str(exc))]
    diagnostics += config.problems()
    return (None if diagnostics else config), diagnostics


def _parse_value(text, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, str):
        return text
    return json.loads(text)


def _add_config_flags(parser):
    defaults = RunConfig()
    group = parser.add_argument_group("config overrides")
    for f in fields(RunConfig):
        key = _config_key(f.name)
        group.add_argument(
            "--" + key.replace("_", "-"),
            dest="cfg_" + f.name,
            metavar=type(getattr(defaults, f.name)).__name__.upper(),
            default=None,
            help=f"default: {json.dumps(getattr(defaults, f.name))}",
        )


def _overrides(args):
    defaults = RunConfig()
    out, bad = {}, []
    for f in fields(RunConfig):
        text = getattr(args, "cfg_" + f.name, None)
        if text is None:
            continue
        default = getattr(defaults, f.name)
        try:
            out[_config_key(f.name)] = _parse_value(text, default if default is not None else [])
        except (ValueError, json.JSONDecodeError) as exc:
            bad.append((_config_key(f.name), f"cannot parse {text!r}: {exc}"))
    if bad:
        raise ConfigError(bad)
    return out


def _resolve(args):
    config, diagnostics = validate_config(args.config, _overrides(args))
    if diagnostics:
        raise ConfigError(diagnostics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.write_json(out / "config.resolved.json", config.to_dict())
    return config, out


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------


def _need(path):
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"missing input: {path}")
    return path


def _load_target(out, config, name="target.csv"):
    return datasets.load_csv(_need(out / name), config.num_classes, "TARGET")


def _write_data(config, out):
    source, target, target_test, oracle = pipeline.make_data(config)
    datasets.save_csv(source, out / "source.csv")
    datasets.save_csv(target, out / "target.csv")
    datasets.save_csv(target_test, out / "target_test.csv")
    oracle.save(out / "oracle.json")
    return source, target, target_test, oracle


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    config, out = _resolve(args)
    source, target, target_test, _ = _write_data(config, out)
    log.info("wrote %d source, %d target, %d target-test samples to %s", len(source), len(target), len(target_test), out)


def cmd_adapt(args):
    config, out = _resolve(args)
    source = datasets.load_csv(_need(out / "source.csv"), config.num_classes, "SOURCE")
    target = _load_target(out, config)
    model, record = pipeline.train_uda(config, source, target)
    save_checkpoint(model, out / "model_uda.npz", pipeline.seed_lineage(config))
    pipeline.write_json(out / "uda_record.json", record)
    log.info("adapted model %s", record["fingerprint"][:12])


def cmd_select(args):
    config, out = _resolve(args)
    if args.scores:
        table = scoring.ScoreTable.load(_need(args.scores))
        k = config.budget_k(len(table))
        sel = budget.select(
            table, config.strategy, k, seed=pipeline.phase_seed(config.seed, "sampler"), literal_bins=config.literal_bins
        )
        if Path(args.scores).resolve() != (out / "scores.csv").resolve():
            table.save(out / "scores.csv")
        sel.save(out / "selection.csv")
    else:
        model, _ = load_checkpoint(_need(out / "model_uda.npz"))
        target = _load_target(out, config)
        table, sel = pipeline.run_selection(model, target, config, out_dir=out)
    log.info("selected %d samples with %s", sel.k, sel.strategy)


def cmd_finetune(args):
    config, out = _resolve(args)
    model, _ = load_checkpoint(_need(out / "model_uda.npz"))
    target = _load_target(out, config)
    target_test = _load_target(out, config, "target_test.csv")
    oracle = datasets.LabelOracle.load(_need(out / "oracle.json"))
    sel = budget.BudgetSelection.load(_need(out / "selection.csv"))
    pool = datasets.query_labels(oracle, sel, target)
    oracle.save(out / "oracle.json")
    ft_model, record = pipeline.finetune(model, pool, config, target_test)
    datasets.save_csv(pool, out / "pool.csv")
    save_checkpoint(ft_model, out / "model_finetuned.npz", pipeline.seed_lineage(config))
    pipeline.write_json(out / "finetune_record.json", record)
    row = {
        "model": config.model_label,
        "sampler": config.sampler_label,
        "k": sel.k,
        "uda_target_accuracy": pipeline.evaluate(model, target_test),
        "finetune_target_accuracy": pipeline.evaluate(ft_model, target_test),
        "oracle_queries": oracle.query_count,
    }
    (out / "results.csv").write_text(pipeline.results_csv([row]))


def cmd_evaluate(args):
    config, out = _resolve(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model_finetuned.npz"
    model, _ = load_checkpoint(_need(ckpt))
    data = _load_target(out, config, "target_test.csv")
    acc = pipeline.evaluate(model, data, Domain[args.domain.upper()])
    pipeline.write_json(out / "evaluation.json", {"checkpoint": str(ckpt), "domain": args.domain, "accuracy": acc})
    print(f"{acc:.6f}")


def cmd_analyze(args):
    config, out = _resolve(args)
    target_test = _load_target(out, config, "target_test.csv")
    curves = {}
    for name in args.checkpoints or [str(out / "model_uda.npz")]:
        model, _ = load_checkpoint(_need(name))
        curves[Path(name).stem] = analysis.entropy_accuracy_curve(model, target_test)
    first_name, first = next(iter(curves.items()))
    (out / "curve.csv").write_text(first.to_csv())
    for name, c in curves.items():
        (out / f"curve_{name}.csv").write_text(c.to_csv())
    rows = analysis.compare_regions(curves, args.low_quantile, args.high_quantile)
    (out / "regions.csv").write_text(analysis.regions_to_csv(rows))
    if (out / "scores.csv").exists() and (out / "selection.csv").exists():
        table = scoring.ScoreTable.load(out / "scores.csv")
        sel = budget.BudgetSelection.load(out / "selection.csv")
        (out / "histogram.csv").write_text(analysis.selection_histogram(table, sel, args.bins).to_csv())


def cmd_run_all(args):
    config, out = _resolve(args)
    pipeline.run_all(config, out)


def cmd_run_matrix(args):
    config, out = _resolve(args)
    rows = pipeline.run_matrix(pipeline.matrix_configs(config), workers=args.workers)
    (out / "matrix.csv").write_text(pipeline.matrix_csv(rows))
    pipeline.write_json(out / "matrix.json", rows)


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic source/target benchmark"),
    "adapt": (cmd_adapt, "train the domain-adapted model"),
    "select": (cmd_select, "score the target set and select the budget"),
    "finetune": (cmd_finetune, "query the oracle for the budget and fine-tune"),
    "evaluate": (cmd_evaluate, "accuracy of a checkpoint on the target test split"),
    "analyze": (cmd_analyze, "entropy-accuracy curves, region report and selection histogram"),
    "run-all": (cmd_run_all, "all phases end to end"),
    "run-matrix": (cmd_run_matrix, "model x sampler comparison table"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="lowbudget", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--out", default=os.environ.get(OUTPUT_ENV, "lowbudget_out"), help=f"output directory (env {OUTPUT_ENV})")
        if name == "select":
            p.add_argument("--scores", help="select from a persisted score table instead of scoring a checkpoint")
        if name == "evaluate":
            p.add_argument("--checkpoint")
            p.add_argument("--domain", default="target", choices=["source", "target", "target_perturbed"])
        if name == "analyze":
            p.add_argument("--checkpoints", nargs="*")
            p.add_argument("--bins", type=int, default=20)
            p.add_argument("--low-quantile", type=float, default=0.2)
            p.add_argument("--high-quantile", type=float, default=0.8)
        if name == "run-matrix":
            p.add_argument("--workers", type=int, default=1)
        _add_config_flags(p)
    return parser


def _fail(code, kind, message, **extra):
    print(json.dumps({"error": kind, "exit": code, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), fields=[k for k, _ in exc.diagnostics])
    except (MissingInput, FileNotFoundError, FormatError) as exc:
        return _fail(EXIT_MISSING, "missing_input", str(exc))
    except TrainingDivergence as exc:
        return _fail(EXIT_DIVERGED, "divergence", str(exc), step=exc.step)
    except (ContractViolation, DataError, DomainError) as exc:
        return _fail(EXIT_CONTRACT, "contract", str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
