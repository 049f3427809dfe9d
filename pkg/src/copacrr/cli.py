"""Command-line pipeline.

Subcommands: ``prepare`` (precompute and cache scorer inputs), ``train``
(fit one model on a train/validation split), ``rerank`` (re-score a run
file with a checkpoint), ``eval`` (ERR@20 reports, optional re-rank
comparison and pair-accuracy report), and ``ablate`` (train and compare
all eight component variants under one seed).

Settings come from an optional flat key=value config file, overridden by
repeated ``--set key=value`` flags and then by dedicated flags; unknown
keys are rejected. Exit codes: 0 success, 2 configuration error, 3 data
error, 4 numerical failure.

Report-producing commands write, next to each other: an aligned plain-text
table, a tab-separated records file, and a rendered figure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .cache import SimInputCache
from .corpus import (
    CollectionStats,
    Document,
    Judgments,
    Query,
    build_queries,
    load_documents,
    load_query_texts,
    read_qrels,
    read_run,
    write_run,
)
from .embedding import CACHE_MAGIC, EmbeddingTable
from .errors import ConfigError, DataError, NumericalError, OovQueryError
from .evaluation import (
    GradedRanking,
    graded_from_run,
    err_at_k,
    mean_run_err,
    pair_accuracy,
    rerank_all_stats,
    rerank_with_model,
    LABEL_PAIRS,
)
from .model import (
    ModelConfig,
    VARIANT_ORDER,
    load_checkpoint,
    score_inference,
)
from .report import (
    fig_err_per_query,
    fig_training_curves,
    fig_variant_bars,
    format_table,
    write_records,
    write_text,
)
from .training import FoldData, TrainConfig, run_fold

log = logging.getLogger(__name__)

DEFAULT_CACHE_DIR = ".copacrr-cache"


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


MODEL_KEYS = {
    "l_q": int,
    "l_d": int,
    "l_g": int,
    "n_f": int,
    "n_s": int,
    "n_c": int,
    "w_c": int,
    "hidden_sizes": _parse_int_list,
    "cascade": _parse_bool,
    "disamb": _parse_bool,
    "shuffle": _parse_bool,
    "loss": str,
}
TRAIN_KEYS = {
    "learning_rate": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "batch_size": int,
    "batches_per_iteration": int,
    "iterations": int,
    "seed": int,
    "pair_mode": str,
    "workers": int,
}
PATH_KEYS = ("embeddings", "docs", "queries", "qrels", "groups", "cache_dir")
MISC_KEYS = {"tag": str, "err_cutoff": int, "tie_policy": str}

SCHEMA: dict = {}
SCHEMA.update(MODEL_KEYS)
SCHEMA.update(TRAIN_KEYS)
SCHEMA.update({k: str for k in PATH_KEYS})
SCHEMA.update(MISC_KEYS)


def _convert(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    conv = SCHEMA[key]
    try:
        return conv(raw) if conv is not str else raw
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for key {key!r}") from None


def parse_config_file(path: str) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment."""
    settings: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            settings[key] = _convert(key, raw)
    return settings


def build_settings(args) -> dict:
    """Merge config file, --set overrides, then dedicated flags."""
    settings: dict = {}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise DataError(f"config file {args.config} does not exist")
        settings.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        settings[key] = _convert(key, raw)
    for key in PATH_KEYS + ("tag",):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if getattr(args, "seed", None) is not None:
        settings["seed"] = args.seed
    return settings


def model_config_from(settings: dict) -> ModelConfig:
    return ModelConfig(**{k: settings[k] for k in MODEL_KEYS if k in settings})


def train_config_from(settings: dict) -> TrainConfig:
    return TrainConfig(**{k: settings[k] for k in TRAIN_KEYS if k in settings})


def resolve_cache_dir(args, settings: dict) -> str:
    if getattr(args, "cache_dir", None):
        return args.cache_dir
    env = os.environ.get("COPACRR_CACHE_DIR")
    if env:
        return env
    return settings.get("cache_dir", DEFAULT_CACHE_DIR)


def require_paths(settings: dict, names: tuple[str, ...]) -> None:
    for name in names:
        if name not in settings:
            raise ConfigError(f"required path setting {name!r} is missing")
        if not os.path.exists(settings[name]):
            raise DataError(f"{name} path {settings[name]!r} does not exist")


def load_embeddings(path: str) -> EmbeddingTable:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == CACHE_MAGIC:
        return EmbeddingTable.load_cache(path)
    return EmbeddingTable.load_text(path)


class Bundle:
    """Corpus, embeddings, and the cached input provider for one setup."""

    def __init__(self, settings: dict, config: ModelConfig, cache_dir: str):
        self.table = load_embeddings(settings["embeddings"])
        self.docs: dict[str, Document] = load_documents(settings["docs"])
        stats = CollectionStats(self.docs)
        self.queries: dict[str, Query] = build_queries(
            load_query_texts(settings["queries"]), stats
        )
        self.judgments: Judgments | None = (
            read_qrels(settings["qrels"]) if "qrels" in settings else None
        )
        self.cache = SimInputCache(
            cache_dir, self.table, config.l_q, config.l_d, config.w_c
        )

    def provider(self, qid: str, did: str):
        return self.cache.get(self.queries[qid], self.docs[did])

    def scorer(self, params, config):
        def score(qid: str, did: str):
            if qid not in self.queries or did not in self.docs:
                return None
            return score_inference(self.provider(qid, did), params, config)

        return score


def load_groups(path: str) -> dict[str, str]:
    groups: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected 'query_id<TAB>group'")
            qid, group = line.split("\t", 1)
            groups[qid] = group
    return groups


def select_group_queries(
    groups: dict[str, str], wanted: str, known_queries: dict[str, Query]
) -> list[str]:
    names = [g.strip() for g in wanted.split(",") if g.strip()]
    if not names:
        raise ConfigError("empty group selection")
    selected = sorted(
        qid for qid, g in groups.items() if g in names and qid in known_queries
    )
    if not selected:
        raise DataError(f"no known queries in group(s) {names}")
    return selected


def judged_candidates(judgments: Judgments, queries: list[str], docs) -> dict:
    candidates = {}
    for qid in queries:
        cands = sorted(
            did for did in judgments.merged_by_query(qid) if did in docs
        )
        if cands:
            candidates[qid] = cands
    return candidates


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    settings = build_settings(args)
    config = model_config_from(settings)
    require_paths(settings, ("embeddings", "docs", "queries", "qrels"))
    bundle = Bundle(settings, config, resolve_cache_dir(args, settings))
    judgments = bundle.judgments
    assert judgments is not None

    oov_queries: list[str] = []
    skipped_missing = 0
    prepared = 0
    for qid in sorted(judgments.query_ids()):
        if qid not in bundle.queries:
            skipped_missing += 1
            continue
        try:
            for did in judgments.judged_docs(qid):
                if did not in bundle.docs:
                    skipped_missing += 1
                    continue
                bundle.provider(qid, did)
                prepared += 1
        except OovQueryError:
            oov_queries.append(qid)
    stats = bundle.cache.stats
    print(f"prepared {prepared} (query, document) inputs")
    print(
        f"sim cache: {stats['sim_hits']} hits, {stats['sim_misses']} misses; "
        f"ctx cache: {stats['ctx_hits']} hits, {stats['ctx_misses']} misses"
    )
    if skipped_missing:
        print(f"skipped {skipped_missing} judged pairs with missing query/document")
    for qid in oov_queries:
        print(f"query {qid}: every term is out of vocabulary, no context features")
    if prepared == 0:
        raise DataError("no (query, document) input could be prepared")
    return 0


def cmd_train(args) -> int:
    settings = build_settings(args)
    config = model_config_from(settings)
    train_cfg = train_config_from(settings)
    require_paths(settings, ("embeddings", "docs", "queries", "qrels", "groups"))
    bundle = Bundle(settings, config, resolve_cache_dir(args, settings))
    groups = load_groups(settings["groups"])
    train_q = select_group_queries(groups, args.train_groups, bundle.queries)
    val_q = select_group_queries(groups, args.val_groups, bundle.queries)
    data = FoldData(
        train_queries=train_q,
        val_queries=val_q,
        judgments=bundle.judgments,
        provider=bundle.provider,
        candidates=judged_candidates(bundle.judgments, val_q, bundle.docs),
    )

    def progress(record):
        print(
            f"iteration {record.iteration}: loss {record.mean_loss:.6f} "
            f"val-ERR@20 {record.val_err:.6f}"
        )

    result = run_fold(data, config, train_cfg, checkpoint_path=args.out, progress=progress)
    print(
        f"selected iteration {result.best_iteration} "
        f"(val-ERR@20 {result.best_val_err:.6f}); checkpoint written to {args.out}"
    )
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    history = [(r.iteration, r.mean_loss, r.val_err) for r in result.history]
    write_records(
        os.path.join(out_dir, "training_log.tsv"),
        ("iteration", "mean_loss", "val_err20"),
        history,
    )
    fig_training_curves(history, os.path.join(out_dir, "training_curve.png"))
    return 0


def cmd_rerank(args) -> int:
    settings = build_settings(args)
    require_paths(settings, ("embeddings", "docs", "queries"))
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint {args.checkpoint} does not exist")
    if not os.path.exists(args.run):
        raise DataError(f"run file {args.run} does not exist")
    params, config = load_checkpoint(args.checkpoint)
    bundle = Bundle(settings, config, resolve_cache_dir(args, settings))
    scorer = bundle.scorer(params, config)
    stats: dict = {}
    reranked = [
        rerank_with_model(ranked, scorer, stats) for ranked in read_run(args.run)
    ]
    write_run(reranked, args.out, settings.get("tag", "copacrr"))
    print(f"re-ranked {len(reranked)} queries into {args.out}")
    if stats.get("missing_docs"):
        print(f"{stats['missing_docs']} documents had no text and sank to the bottom")
    return 0


def cmd_eval(args) -> int:
    settings = build_settings(args)
    require_paths(settings, ("qrels",))
    judgments = read_qrels(settings["qrels"])
    cutoff = settings.get("err_cutoff", 20)
    for run_path in args.runs:
        if not os.path.exists(run_path):
            raise DataError(f"run file {run_path} does not exist")

    scorer = None
    bundle = None
    if args.checkpoint:
        require_paths(settings, ("embeddings", "docs", "queries"))
        params, config = load_checkpoint(args.checkpoint)
        bundle = Bundle(settings, config, resolve_cache_dir(args, settings))
        scorer = bundle.scorer(params, config)

    os.makedirs(args.out_dir, exist_ok=True)
    headers = ["run", "queries", f"err@{cutoff}"]
    if scorer is not None:
        headers += [f"reranked-err@{cutoff}", "delta"]
    rows = []
    records: list[tuple] = []
    per_query_fig: dict[str, list[tuple[str, float]]] = {}
    runs = []
    for run_path in args.runs:
        name = os.path.basename(run_path)
        run = read_run(run_path)
        runs.append(run)
        before = mean_run_err(run, judgments, cutoff)
        per_query_fig[name] = [
            (rl.query_id, err_at_k(graded_from_run(rl, judgments), cutoff))
            for rl in run
        ]
        row = [name, len(run), before]
        records.append((name, f"err@{cutoff}", before))
        if scorer is not None:
            after = mean_run_err(
                [rerank_with_model(rl, scorer) for rl in run], judgments, cutoff
            )
            row += [after, after - before]
            records.append((name, f"reranked-err@{cutoff}", after))
        rows.append(row)

    lines = [format_table(headers, rows)]
    if scorer is not None:
        stats = rerank_all_stats(runs, scorer, judgments, cutoff)
        lines.append(
            f"\nruns improved: {stats['improved_fraction']:.4f}  "
            f"mean relative delta: {stats['mean_relative_delta']:.4f}  "
            f"zero-baseline runs excluded: {stats['excluded_zero_baseline']}\n"
        )
        records.append(("ALL", "improved_fraction", stats["improved_fraction"]))
        records.append(("ALL", "mean_relative_delta", stats["mean_relative_delta"]))

    if args.pair_accuracy:
        if scorer is None or bundle is None:
            raise ConfigError("--pair-accuracy needs --checkpoint and corpus paths")
        qids = sorted(
            qid for qid in judgments.query_ids() if qid in bundle.queries
        )
        report = pair_accuracy(judgments, scorer, qids, settings.get("tie_policy", "incorrect"))
        acc_rows = [
            (
                name,
                report.per_pair[name].tested,
                report.per_pair[name].accuracy,
            )
            for name in LABEL_PAIRS
        ]
        acc_rows.append(("overall", report.total_tested, report.overall_accuracy))
        lines.append("\n" + format_table(["label pair", "pairs", "accuracy"], acc_rows))
        for name in LABEL_PAIRS:
            records.append(("MODEL", f"pair-accuracy:{name}", report.per_pair[name].accuracy))
        records.append(("MODEL", "pair-accuracy:overall", report.overall_accuracy))

    text = "".join(lines)
    print(text, end="")
    write_text(os.path.join(args.out_dir, "eval_report.txt"), text)
    write_records(
        os.path.join(args.out_dir, "eval_records.tsv"),
        ("run", "metric", "value"),
        records,
    )
    fig_err_per_query(
        per_query_fig, os.path.join(args.out_dir, "eval_err_per_query.png")
    )
    return 0


def cmd_ablate(args) -> int:
    settings = build_settings(args)
    base_config = model_config_from(settings)
    train_cfg = train_config_from(settings)
    require_paths(settings, ("embeddings", "docs", "queries", "qrels", "groups"))
    bundle = Bundle(settings, base_config, resolve_cache_dir(args, settings))
    groups = load_groups(settings["groups"])
    train_q = select_group_queries(groups, args.train_groups, bundle.queries)
    val_q = select_group_queries(groups, args.val_groups, bundle.queries)
    test_q = select_group_queries(groups, args.test_groups, bundle.queries)
    cutoff = settings.get("err_cutoff", 20)

    data = FoldData(
        train_queries=train_q,
        val_queries=val_q,
        judgments=bundle.judgments,
        provider=bundle.provider,
        candidates=judged_candidates(bundle.judgments, val_q, bundle.docs),
        test_queries=test_q,
    )
    test_candidates = judged_candidates(bundle.judgments, test_q, bundle.docs)

    headers = [
        "variant",
        "best-iter",
        f"val-err@{cutoff}",
        f"test-err@{cutoff}",
        *LABEL_PAIRS,
        "overall",
    ]
    rows = []
    records: list[tuple] = []
    history_rows: list[tuple] = []
    fig_metrics: dict[str, dict[str, float]] = {}
    for variant in VARIANT_ORDER:
        config = base_config.with_variant(variant)
        log.info("ablation: training %s", variant)
        result = run_fold(data, config, train_cfg)
        scorer = bundle.scorer(result.best_params, config)
        test_err_values = []
        for qid in sorted(test_candidates):
            cands = test_candidates[qid]
            scores = [scorer(qid, did) for did in cands]
            order = sorted(
                range(len(cands)),
                key=lambda i: (
                    -(scores[i] if scores[i] is not None else float("-inf")),
                    i,
                ),
            )
            grades = []
            for i in order:
                g = bundle.judgments.merged_grade(qid, cands[i])
                grades.append(g if g is not None else 0)
            test_err_values.append(err_at_k(GradedRanking(grades), cutoff))
        test_err = float(np.mean(test_err_values)) if test_err_values else 0.0
        report = pair_accuracy(
            bundle.judgments, scorer, test_q, settings.get("tie_policy", "incorrect")
        )
        row = [
            variant,
            result.best_iteration,
            result.best_val_err,
            test_err,
            *[report.per_pair[name].accuracy for name in LABEL_PAIRS],
            report.overall_accuracy,
        ]
        rows.append(row)
        records.append((variant, f"val-err@{cutoff}", result.best_val_err))
        records.append((variant, f"test-err@{cutoff}", test_err))
        for name in LABEL_PAIRS:
            records.append((variant, f"pair-accuracy:{name}", report.per_pair[name].accuracy))
        records.append((variant, "pair-accuracy:overall", report.overall_accuracy))
        for rec in result.history:
            history_rows.append((variant, rec.iteration, rec.mean_loss, rec.val_err))
        fig_metrics[variant] = {
            name: report.per_pair[name].accuracy for name in LABEL_PAIRS
        }

    table = format_table(headers, rows)
    print(table, end="")
    os.makedirs(args.out_dir, exist_ok=True)
    write_text(os.path.join(args.out_dir, "ablation_table.txt"), table)
    write_records(
        os.path.join(args.out_dir, "ablation_records.tsv"),
        ("variant", "metric", "value"),
        records,
    )
    write_records(
        os.path.join(args.out_dir, "ablation_history.tsv"),
        ("variant", "iteration", "mean_loss", "val_err20"),
        history_rows,
    )
    fig_variant_bars(
        fig_metrics, LABEL_PAIRS, os.path.join(args.out_dir, "ablation_accuracy.png")
    )
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser, paths: tuple[str, ...]) -> None:
    parser.add_argument("--config", help="flat key=value settings file")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one settings key (repeatable)",
    )
    for name in paths:
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name)
    parser.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="copacrr",
        description="Context-aware convolutional re-ranking pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="precompute and cache scorer inputs")
    _add_common(p, ("embeddings", "docs", "queries", "qrels", "cache_dir"))
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model on a train/validation split")
    _add_common(p, ("embeddings", "docs", "queries", "qrels", "groups", "cache_dir"))
    p.add_argument("--train-groups", required=True, help="comma-separated group names")
    p.add_argument("--val-groups", required=True, help="comma-separated group names")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--out-dir", help="directory for the training log and figure")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rerank", help="re-score a run file with a checkpoint")
    _add_common(p, ("embeddings", "docs", "queries", "cache_dir", "tag"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--run", required=True, help="input run file")
    p.add_argument("--out", required=True, help="output run file")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", help="evaluate run files; optionally compare re-ranking")
    _add_common(p, ("embeddings", "docs", "queries", "qrels", "cache_dir"))
    p.add_argument("runs", nargs="+", help="run files to evaluate")
    p.add_argument("--checkpoint", help="add a re-ranked comparison with this model")
    p.add_argument("--pair-accuracy", action="store_true")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare all eight variants")
    _add_common(p, ("embeddings", "docs", "queries", "qrels", "groups", "cache_dir"))
    p.add_argument("--train-groups", required=True)
    p.add_argument("--val-groups", required=True)
    p.add_argument("--test-groups", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
