"""Command-line interface.

Every subcommand reads an optional flat ``key=value`` config file; explicit
flags override file values, which override built-in defaults.  Unknown
config keys are rejected.  Commands that produce artifacts also write a
``run.kv`` recording the resolved configuration and a build tag, and all
commands echo the resolved configuration to the log.  Exit codes: 0 on
success, 2 for configuration errors, 3 for data errors, 4 for numerical
failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import binindex, metrics, student, teacher
from .config import ACTIVATIONS, Hyperparams, build_tag, read_kv, write_kv
from .data import (
    filter_min_degree,
    load_split,
    parse_ratings,
    split_per_user,
    subsample_users,
    write_split,
)
from .errors import BinrecError, ConfigError, DataError
from .student import binarize

log = logging.getLogger("binrec")

USER_CODES_FILE = "user_codes.binc"
ITEM_CODES_FILE = "item_codes.binc"


@dataclass(frozen=True)
class Opt:
    name: str
    type: type
    default: object = None
    help: str = ""
    required: bool = False


PREPARE_OPTS = [
    Opt("input", str, help="raw ratings file", required=True),
    Opt("format", str, "movielens", "input format: movielens or tsv"),
    Opt("out", str, help="output dataset directory", required=True),
    Opt("min_user", int, 20, "drop users with fewer interactions"),
    Opt("min_item", int, 20, "then drop items with fewer interactions"),
    Opt("ratio", float, 0.5, "per-user fraction of interactions kept for training"),
    Opt("seed", int, 0, "split seed"),
    Opt("user_fraction", float, 1.0, "keep a random fraction of users before filtering"),
]

TRAIN_TEACHER_OPTS = [
    Opt("data", str, help="prepared dataset directory", required=True),
    Opt("out", str, help="teacher checkpoint path", required=True),
    Opt("dim", int, 64, "base embedding width (codes get 3x this)"),
    Opt("activation", str, "sigmoid", f"propagation nonlinearity: {', '.join(ACTIVATIONS)}"),
    Opt("lr", float, 1e-3, "Adam learning rate"),
    Opt("epochs", int, 200, "maximum training epochs"),
    Opt("seed", int, 0, "initialization / sampling seed"),
    Opt("reg_lambda", float, 1e-3, "L2 coefficient on the final embeddings"),
]

DISTILL_OPTS = [
    Opt("data", str, help="prepared dataset directory", required=True),
    Opt("teacher", str, help="teacher checkpoint path", required=True),
    Opt("out", str, help="student checkpoint path", required=True),
    Opt("alpha", float, 10.0, "distillation weight"),
    Opt("temp", float, 1.0, "distillation temperature"),
    Opt("tau", float, 0.2, "rounding-noise temperature"),
    Opt("beta", float, 1e-3, "corner penalty weight"),
    Opt("nu", float, 1e-3, "rounding-noise penalty weight"),
    Opt("lr", float, 1e-3, "Adam learning rate"),
    Opt("epochs", int, 200, "maximum training epochs"),
    Opt("seed", int, 0, "negative-sampling seed"),
]

EXPORT_OPTS = [
    Opt("student", str, help="student checkpoint path", required=True),
    Opt("out", str, help="output directory for packed codes", required=True),
]

RECOMMEND_OPTS = [
    Opt("data", str, help="prepared dataset directory", required=True),
    Opt("codes", str, help="directory holding packed codes", required=True),
    Opt("user", str, help="user identifier to recommend for", required=True),
    Opt("k", int, 10, "number of recommendations"),
]

EVALUATE_OPTS = [
    Opt("data", str, help="prepared dataset directory", required=True),
    Opt("codes", str, help="directory holding packed codes"),
    Opt("teacher", str, help="teacher checkpoint (real-valued baseline)"),
    Opt("out", str, help="report directory", required=True),
    Opt("k", int, 100, "ranking cutoff"),
    Opt("dataset", str, "", "dataset label for the CSV row (defaults to the data dir name)"),
    Opt("model", str, "", "model label for the CSV row"),
    Opt("seed", int, 0, "seed label for the CSV row"),
]

BENCH_OPTS = [
    Opt("codes", str, help="directory holding packed codes (otherwise synthetic)"),
    Opt("d", int, 192, "code width for synthetic codes"),
    Opt("n_items", int, 100_000, "item count for synthetic codes"),
    Opt("n_users", int, 256, "query count for synthetic codes"),
    Opt("k", int, 100, "ranking cutoff"),
    Opt("repetitions", int, 3, "timed passes over the query set"),
    Opt("seed", int, 0, "synthetic code seed"),
    Opt("out", str, help="report file (bench.kv)", required=True),
]


def _add_options(parser: argparse.ArgumentParser, opts: list[Opt]) -> None:
    parser.add_argument("--config", type=str, default=None, help="key=value config file")
    for opt in opts:
        flag = "--" + opt.name.replace("_", "-")
        suffix = f" (default: {opt.default})" if opt.default is not None else ""
        parser.add_argument(flag, type=opt.type, default=None, help=opt.help + suffix, dest=opt.name)


def _resolve(args: argparse.Namespace, opts: list[Opt]) -> dict:
    """defaults < config file < explicit flags; unknown file keys rejected."""
    by_name = {opt.name: opt for opt in opts}
    cfg = {opt.name: opt.default for opt in opts}
    if args.config is not None:
        for key, text in read_kv(args.config).items():
            opt = by_name.get(key)
            if opt is None:
                raise ConfigError(f"{args.config}: unknown config key {key!r}")
            try:
                cfg[key] = opt.type(text)
            except ValueError as exc:
                raise ConfigError(f"{args.config}: key {key!r}: cannot parse {text!r} as {opt.type.__name__}") from exc
    for opt in opts:
        value = getattr(args, opt.name)
        if value is not None:
            cfg[opt.name] = value
    for opt in opts:
        if opt.required and cfg[opt.name] is None:
            raise ConfigError(f"missing required option --{opt.name.replace('_', '-')}")
    return cfg


def _echo(command: str, cfg: dict) -> dict:
    record = {"command": command, "build": build_tag()}
    record.update({k: v for k, v in cfg.items() if v is not None})
    for key in sorted(record):
        log.info("config %s=%s", key, record[key])
    return record


def _write_run_record(target: Path, record: dict) -> None:
    """run.kv inside directory outputs, or a .run.kv sibling of file outputs."""
    path = target / "run.kv" if target.is_dir() else target.with_name(target.name + ".run.kv")
    write_kv(path, record)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_prepare(args: argparse.Namespace) -> int:
    cfg = _resolve(args, PREPARE_OPTS)
    record = _echo("prepare", cfg)
    with open(cfg["input"]) as fh:
        interactions = parse_ratings(fh, cfg["format"])
    if cfg["user_fraction"] != 1.0:
        interactions = subsample_users(interactions, cfg["user_fraction"], cfg["seed"])
    interactions = filter_min_degree(interactions, cfg["min_user"], cfg["min_item"])
    if not interactions:
        raise DataError(
            f"no interactions survive min_user={cfg['min_user']}, min_item={cfg['min_item']}"
        )
    split = split_per_user(interactions, cfg["ratio"], cfg["seed"])
    out = Path(cfg["out"])
    write_split(
        split,
        out,
        meta={
            "format": cfg["format"],
            "min_user": cfg["min_user"],
            "min_item": cfg["min_item"],
            "ratio": cfg["ratio"],
            "user_fraction": cfg["user_fraction"],
            "source": cfg["input"],
        },
    )
    _write_run_record(out, record)
    log.info(
        "prepared %d users, %d items, %d train / %d test interactions",
        split.train.num_users,
        split.train.num_items,
        split.train.num_interactions,
        sum(len(t) for t in split.test_positives),
    )
    return 0


def _hyper_from(cfg: dict, **overrides) -> Hyperparams:
    fields = {
        key: cfg[key]
        for key in (
            "dim", "activation", "lr", "epochs", "seed", "reg_lambda",
            "alpha", "temp", "tau", "beta", "nu",
        )
        if key in cfg
    }
    fields.update(overrides)
    return Hyperparams(**fields).validate()


def cmd_train_teacher(args: argparse.Namespace) -> int:
    cfg = _resolve(args, TRAIN_TEACHER_OPTS)
    record = _echo("train-teacher", cfg)
    split, _ = load_split(cfg["data"])
    run = teacher.train_teacher(split, _hyper_from(cfg))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    teacher.save_teacher(out, run)
    _write_run_record(out, record)
    if run.losses:
        log.info("teacher trained for %d epochs; final loss %.6g", len(run.losses), run.losses[-1])
    return 0


def cmd_distill(args: argparse.Namespace) -> int:
    cfg = _resolve(args, DISTILL_OPTS)
    record = _echo("distill", cfg)
    split, _ = load_split(cfg["data"])
    teacher_run = teacher.load_teacher(cfg["teacher"])
    hyper = _hyper_from(cfg, dim=teacher_run.params.dim, activation=teacher_run.params.activation)
    run = student.train_student(teacher_run, split, hyper)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    student.save_student(out, run, hyper)
    _write_run_record(out, record)
    if run.losses:
        log.info("student trained for %d epochs; final loss %.6g", len(run.losses), run.losses[-1])
    return 0


def cmd_export_codes(args: argparse.Namespace) -> int:
    cfg = _resolve(args, EXPORT_OPTS)
    record = _echo("export-codes", cfg)
    params, _ = student.load_student(cfg["student"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    binindex.save_codes(out / USER_CODES_FILE, binindex.pack_codes(binarize(params.user_raw)))
    binindex.save_codes(out / ITEM_CODES_FILE, binindex.pack_codes(binarize(params.item_raw)))
    _write_run_record(out, record)
    log.info("exported %d-bit codes to %s", params.user_raw.shape[1], out)
    return 0


def _load_code_pair(codes_dir: str) -> tuple[binindex.PackedCodes, binindex.PackedCodes]:
    root = Path(codes_dir)
    return (
        binindex.load_codes(root / USER_CODES_FILE),
        binindex.load_codes(root / ITEM_CODES_FILE),
    )


def cmd_recommend(args: argparse.Namespace) -> int:
    cfg = _resolve(args, RECOMMEND_OPTS)
    _echo("recommend", cfg)
    split, _ = load_split(cfg["data"])
    user_codes, item_codes = _load_code_pair(cfg["codes"])
    graph = split.train
    user = graph.user_index.get(cfg["user"])
    if user is None:
        raise DataError(f"unknown user {cfg['user']!r}")
    ranked = binindex.topk(
        user_codes.words[user], item_codes, cfg["k"], exclude=graph.positives_mask(user)
    )
    for item, score in zip(ranked.indices, ranked.scores):
        print(f"{graph.item_keys[item]}\t{int(score)}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _resolve(args, EVALUATE_OPTS)
    record = _echo("evaluate", cfg)
    split, _ = load_split(cfg["data"])
    if cfg["codes"] and cfg["teacher"]:
        raise ConfigError("pass either --codes or --teacher, not both")
    if cfg["codes"]:
        scorer = metrics.BinaryScorer(*_load_code_pair(cfg["codes"]))
        model = cfg["model"] or "binary"
    elif cfg["teacher"]:
        run = teacher.load_teacher(cfg["teacher"])
        scorer = metrics.EmbeddingScorer(run.user_factors, run.item_factors)
        model = cfg["model"] or "teacher"
    else:
        raise ConfigError("evaluate needs --codes or --teacher")
    report = metrics.evaluate(scorer, split, cfg["k"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    dataset = cfg["dataset"] or Path(cfg["data"]).name
    write_kv(out / "eval.kv", {"dataset": dataset, "model": model, "seed": cfg["seed"], **report.as_dict()})
    metrics.append_csv_row(out / "results.csv", dataset, model, cfg["seed"], report)
    _write_run_record(out, record)
    for key, value in report.as_dict().items():
        print(f"{key}={value}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _resolve(args, BENCH_OPTS)
    record = _echo("bench", cfg)
    if cfg["codes"]:
        user_codes, item_codes = _load_code_pair(cfg["codes"])
    else:
        rng = np.random.default_rng(cfg["seed"])

        def random_codes(rows: int) -> binindex.PackedCodes:
            return binindex.pack_codes(rng.integers(0, 2, size=(rows, cfg["d"])) * 2 - 1)

        user_codes = random_codes(cfg["n_users"])
        item_codes = random_codes(cfg["n_items"])
    report = binindex.bench(user_codes, item_codes, cfg["k"], cfg["repetitions"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_kv(out, report)
    _write_run_record(out, record)
    for key in sorted(report):
        print(f"{key}={report[key]}")
    if not report["valid"]:
        log.warning("benchmark ran zero repetitions; report flagged invalid")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = [
    ("prepare", cmd_prepare, PREPARE_OPTS, "parse, filter, and split a ratings file"),
    ("train-teacher", cmd_train_teacher, TRAIN_TEACHER_OPTS, "train the graph-convolutional teacher"),
    ("distill", cmd_distill, DISTILL_OPTS, "distill the teacher into binary code parameters"),
    ("export-codes", cmd_export_codes, EXPORT_OPTS, "round a student checkpoint to packed codes"),
    ("recommend", cmd_recommend, RECOMMEND_OPTS, "print top-K items for one user"),
    ("evaluate", cmd_evaluate, EVALUATE_OPTS, "compute ranking metrics on the held-out split"),
    ("bench", cmd_bench, BENCH_OPTS, "time packed retrieval against the dense baseline"),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="binrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, opts, help_text in _COMMANDS:
        cmd = sub.add_parser(name, help=help_text)
        _add_options(cmd, opts)
        cmd.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BinrecError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        log.error("file not found: %s", exc.filename or exc)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
