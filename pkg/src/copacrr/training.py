"""Pairwise training: pair sampling from judgments, minibatch updates with
an adaptive optimizer, and the fold harness that selects the iteration
maximizing validation ERR@20.

Embeddings are inputs, never parameters; only convolution kernels and the
dense stack are updated. Everything is deterministic given (seed, data,
config): permutations and pair draws come from one seeded generator, and
per-example gradients are reduced in example-index order even when a
thread pool computes them.
"""

from __future__ import annotations

import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import numerics as nm
from .corpus import Judgments
from .embedding import SimInput
from .errors import ConfigError, DataError, NumericalError, NonFiniteError
from .evaluation import err_at_k, GradedRanking
from .model import (
    ModelConfig,
    ModelParams,
    build_graph,
    init_params,
    make_param_nodes,
    save_checkpoint,
    score_inference,
)

# Maps (query_id, doc_id) to the scorer input for that pair.
SimInputProvider = Callable[[str, str], SimInput]


@dataclass(frozen=True)
class TrainingPair:
    """One training unit: a query with a strictly-better and a worse document."""

    query_id: str
    pos_doc_id: str
    neg_doc_id: str
    pos_grade: int
    neg_grade: int

    def __post_init__(self):
        if self.pos_grade <= self.neg_grade:
            raise ValueError(
                f"pair for query {self.query_id} is not strictly ordered: "
                f"{self.pos_grade} vs {self.neg_grade}"
            )


def enumerate_pairs(
    judgments: Judgments, query_ids: Sequence[str], mode: str = "all"
) -> tuple[list[TrainingPair], int]:
    """All legal pairs under merged grades, plus the count of skipped queries.

    mode "all" admits every strict-dominance pair (HRel>Rel, HRel>NRel,
    Rel>NRel); mode "pos_neg" restricts to relevant-vs-nonrelevant.
    """
    if mode not in ("all", "pos_neg"):
        raise ConfigError(f"unknown pair mode {mode!r}")
    pairs: list[TrainingPair] = []
    skipped = 0
    for qid in query_ids:
        graded = judgments.merged_by_query(qid)
        docs = sorted(graded)
        found = False
        for i, d1 in enumerate(docs):
            for d2 in docs[i + 1 :]:
                g1, g2 = graded[d1], graded[d2]
                if g1 == g2:
                    continue
                hi, lo = (d1, d2) if g1 > g2 else (d2, d1)
                ghi, glo = max(g1, g2), min(g1, g2)
                if mode == "pos_neg" and not (ghi >= 1 and glo == 0):
                    continue
                pairs.append(TrainingPair(qid, hi, lo, ghi, glo))
                found = True
        if not found:
            skipped += 1
    return pairs, skipped


class PairSampler:
    """Uniform sampling over the (query, ordered doc pair) population."""

    def __init__(
        self, judgments: Judgments, query_ids: Sequence[str], mode: str = "all"
    ):
        self.pairs, self.skipped_queries = enumerate_pairs(judgments, query_ids, mode)
        if not self.pairs:
            raise DataError("no query offers a strictly ordered document pair")

    def draw(self, rng: np.random.Generator) -> TrainingPair:
        return self.pairs[int(rng.integers(len(self.pairs)))]


def sample_pairs(
    judgments: Judgments,
    query_ids: Sequence[str],
    rng: np.random.Generator,
    mode: str = "all",
) -> Iterator[TrainingPair]:
    """Endless stream of uniformly sampled training pairs."""
    sampler = PairSampler(judgments, query_ids, mode)
    while True:
        yield sampler.draw(rng)


@dataclass
class TrainConfig:
    """Optimizer and loop settings. An iteration is one pass of
    batches_per_iteration sampled minibatches."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    batches_per_iteration: int = 32
    iterations: int = 150
    seed: int = 0
    pair_mode: str = "all"
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.batches_per_iteration < 1:
            raise ConfigError("batch_size and batches_per_iteration must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass
class AdamState:
    """First/second moment estimates per parameter, and the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.arrays.items()},
            v={k: np.zeros_like(a) for k, a in params.arrays.items()},
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> None:
    """One in-place update with bias-corrected moment estimates."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    for name, arr in params.arrays.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1**state.t)
        v_hat = state.v[name] / (1 - b2**state.t)
        arr -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)


@dataclass
class TrainState:
    """Everything needed to continue or reproduce a run."""

    params: ModelParams
    adam: AdamState
    rng: np.random.Generator
    seed: int
    iteration: int = 0
    best_metric: float = float("-inf")
    best_iteration: int = 0
    best_params: ModelParams | None = None

    @classmethod
    def fresh(cls, config: ModelConfig, train_cfg: TrainConfig) -> "TrainState":
        rng = np.random.default_rng(train_cfg.seed)
        params = init_params(config, rng)
        return cls(params, AdamState.like(params), rng, train_cfg.seed)


def _loss_node(config: ModelConfig, rel_pos: nm.Node, rel_neg: nm.Node) -> nm.Node:
    if config.loss == "cross_entropy":
        return nm.pairwise_ce_loss(rel_pos, rel_neg)
    return nm.pairwise_margin_loss(rel_pos, rel_neg)


def pair_loss_and_grads(
    pos_input: SimInput,
    neg_input: SimInput,
    params: ModelParams,
    config: ModelConfig,
    perm: np.ndarray | None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients for one pair. The same row permutation
    is applied to both documents of the pair."""
    param_nodes = make_param_nodes(params)
    rel_pos = build_graph(pos_input, param_nodes, config, perm)
    rel_neg = build_graph(neg_input, param_nodes, config, perm)
    loss = _loss_node(config, rel_pos, rel_neg)
    nm.backward(loss)
    grads = {
        name: (node.grad if node.grad is not None else np.zeros_like(node.value.values))
        for name, node in param_nodes.items()
    }
    return float(loss.value.values.reshape(())), grads


def train_batch(
    state: TrainState,
    batch: list[TrainingPair],
    provider: SimInputProvider,
    config: ModelConfig,
    train_cfg: TrainConfig,
    pool: ThreadPoolExecutor | None = None,
) -> float:
    """One optimizer step on the batch-mean loss. Returns the mean loss."""
    perms: list[np.ndarray | None] = []
    for _ in batch:
        perms.append(state.rng.permutation(config.l_q) if config.shuffle else None)

    def one(idx: int) -> tuple[float, dict[str, np.ndarray]]:
        pair = batch[idx]
        return pair_loss_and_grads(
            provider(pair.query_id, pair.pos_doc_id),
            provider(pair.query_id, pair.neg_doc_id),
            state.params,
            config,
            perms[idx],
        )

    try:
        if pool is not None:
            results = list(pool.map(one, range(len(batch))))
        else:
            results = [one(i) for i in range(len(batch))]
    except NonFiniteError as exc:
        ids = [(p.query_id, p.pos_doc_id, p.neg_doc_id) for p in batch]
        raise NumericalError(f"non-finite values while training on {ids}: {exc}") from exc

    total = {name: np.zeros_like(arr) for name, arr in state.params.arrays.items()}
    losses = []
    for loss, grads in results:  # example-index order: deterministic reduction
        losses.append(loss)
        for name in total:
            total[name] += grads[name]
    mean_loss = float(np.mean(losses))
    if not np.isfinite(mean_loss):
        ids = [(p.query_id, p.pos_doc_id, p.neg_doc_id) for p in batch]
        raise NumericalError(f"non-finite loss {mean_loss} on batch {ids}")
    scale = 1.0 / len(batch)
    adam_step(state.params, {n: g * scale for n, g in total.items()}, state.adam, train_cfg)
    return mean_loss


def train_iteration(
    state: TrainState,
    sampler: PairSampler,
    provider: SimInputProvider,
    config: ModelConfig,
    train_cfg: TrainConfig,
    pool: ThreadPoolExecutor | None = None,
) -> float:
    """One iteration: batches_per_iteration sampled minibatches. Returns
    the mean loss across the iteration's batches."""
    losses = []
    for _ in range(train_cfg.batches_per_iteration):
        batch = [sampler.draw(state.rng) for _ in range(train_cfg.batch_size)]
        losses.append(train_batch(state, batch, provider, config, train_cfg, pool))
    state.iteration += 1
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# Fold harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSpec:
    """Group-level fold roles; a group never serves two roles at once."""

    name: str
    train_groups: tuple[str, ...]
    val_groups: tuple[str, ...]
    test_groups: tuple[str, ...] = ()

    def __post_init__(self):
        roles = [set(self.train_groups), set(self.val_groups), set(self.test_groups)]
        for i in range(len(roles)):
            for j in range(i + 1, len(roles)):
                overlap = roles[i] & roles[j]
                if overlap:
                    raise ConfigError(
                        f"fold {self.name}: groups {sorted(overlap)} appear in two roles"
                    )


def round_robin_folds(groups: Sequence[str]) -> list[FoldSpec]:
    """Every (test group, validation group) combination, training on the rest."""
    folds = []
    for test in groups:
        rest = [g for g in groups if g != test]
        for val in rest:
            train = tuple(g for g in rest if g != val)
            folds.append(
                FoldSpec(
                    name=f"test-{test}-val-{val}",
                    train_groups=train,
                    val_groups=(val,),
                    test_groups=(test,),
                )
            )
    return folds


@dataclass
class FoldData:
    """Resolved data for one fold: query ids per role, scorer inputs,
    judgments, and the candidate documents to re-rank per query."""

    train_queries: list[str]
    val_queries: list[str]
    judgments: Judgments
    provider: SimInputProvider
    candidates: dict[str, list[str]]
    test_queries: list[str] = field(default_factory=list)


@dataclass
class IterationRecord:
    iteration: int
    mean_loss: float
    val_err: float


@dataclass
class FoldResult:
    best_params: ModelParams
    best_iteration: int
    best_val_err: float
    history: list[IterationRecord]


def validation_err(
    query_ids: Sequence[str],
    data: FoldData,
    params: ModelParams,
    config: ModelConfig,
    k: int = 20,
) -> float:
    """Mean ERR@k over queries after re-ranking each candidate list by the
    current model (identity row order; ties keep candidate order)."""
    values = []
    for qid in query_ids:
        cands = data.candidates.get(qid, [])
        if not cands:
            continue
        scores = [
            score_inference(data.provider(qid, did), params, config) for did in cands
        ]
        order = sorted(range(len(cands)), key=lambda i: (-scores[i], i))
        grades = []
        for i in order:
            g = data.judgments.merged_grade(qid, cands[i])
            grades.append(g if g is not None else 0)
        values.append(err_at_k(GradedRanking(grades), k))
    if not values:
        raise DataError("no scorable validation queries")
    return float(np.mean(values))


def select_best(history: list[IterationRecord]) -> IterationRecord:
    """Argmax of validation ERR; ties resolve to the earlier iteration."""
    if not history:
        raise ValueError("empty history")
    best = history[0]
    for rec in history[1:]:
        if rec.val_err > best.val_err:
            best = rec
    return best


def run_fold(
    data: FoldData,
    config: ModelConfig,
    train_cfg: TrainConfig,
    checkpoint_path: str | None = None,
    progress: Callable[[IterationRecord], None] | None = None,
) -> FoldResult:
    """Train up to the configured iteration count, validating after each
    iteration, and keep the parameters of the best-validating iteration."""
    if not data.val_queries:
        raise DataError("fold has an empty validation set")
    sampler = PairSampler(data.judgments, data.train_queries, train_cfg.pair_mode)
    state = TrainState.fresh(config, train_cfg)
    pool = (
        ThreadPoolExecutor(max_workers=train_cfg.workers)
        if train_cfg.workers > 1
        else None
    )
    history: list[IterationRecord] = []
    try:
        for _ in range(train_cfg.iterations):
            mean_loss = train_iteration(
                state, sampler, data.provider, config, train_cfg, pool
            )
            val = validation_err(data.val_queries, data, state.params, config)
            record = IterationRecord(state.iteration, mean_loss, val)
            history.append(record)
            if progress is not None:
                progress(record)
            if val > state.best_metric:  # strict: ties keep the earlier iteration
                state.best_metric = val
                state.best_iteration = state.iteration
                state.best_params = state.params.copy()
    finally:
        if pool is not None:
            pool.shutdown()
    if state.best_params is None:
        raise DataError("training ran for zero iterations; nothing to select")
    if checkpoint_path is not None:
        write_checkpoint_atomic(checkpoint_path, state.best_params, config)
    return FoldResult(state.best_params, state.best_iteration, state.best_metric, history)


def write_checkpoint_atomic(
    path: str, params: ModelParams, config: ModelConfig
) -> None:
    """Write to a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        save_checkpoint(tmp, params, config)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
