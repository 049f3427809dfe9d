import numpy as np
import pytest

from copacrr.corpus import Judgments
from copacrr.embedding import build_sim_input
from copacrr.errors import ConfigError, DataError, NumericalError
from copacrr.model import ModelConfig, init_params
from copacrr.synthetic import make_ngram_corpus
from copacrr.training import (
    AdamState,
    FoldData,
    FoldSpec,
    IterationRecord,
    PairSampler,
    TrainConfig,
    TrainState,
    TrainingPair,
    adam_step,
    enumerate_pairs,
    pair_loss_and_grads,
    round_robin_folds,
    run_fold,
    sample_pairs,
    select_best,
    train_iteration,
    validation_err,
)

MODEL = ModelConfig(
    l_q=4, l_d=32, l_g=3, n_f=4, n_s=2, n_c=2, w_c=2, hidden_sizes=(8, 8)
)


@pytest.fixture(scope="module")
def small_world():
    corpus = make_ngram_corpus(
        n_queries=6, docs_per_query=10, dim=16, doc_len=32, n_groups=3, seed=9
    )
    docs = corpus.documents()
    queries = corpus.queries()
    judgments = Judgments(corpus.qrels)
    inputs = {}

    def provider(qid, did):
        key = (qid, did)
        if key not in inputs:
            inputs[key] = build_sim_input(
                queries[qid], docs[did], corpus.table, MODEL.l_q, MODEL.l_d, MODEL.w_c
            )
        return inputs[key]

    for qid, did in corpus.qrels:
        provider(qid, did)
    return corpus, judgments, provider


# ---------------------------------------------------------------------------
# pair generation and sampling
# ---------------------------------------------------------------------------


def test_training_pair_requires_strict_order():
    with pytest.raises(ValueError):
        TrainingPair("q", "a", "b", 1, 1)


def test_enumerate_pairs_single_pair():
    judgments = Judgments({("q1", "d1"): 2, ("q1", "d2"): 0})
    pairs, skipped = enumerate_pairs(judgments, ["q1"])
    assert len(pairs) == 1 and skipped == 0
    assert (pairs[0].pos_doc_id, pairs[0].neg_doc_id) == ("d1", "d2")


def test_enumerate_pairs_ties_are_excluded_and_counted():
    judgments = Judgments({("q1", "d1"): 1, ("q1", "d2"): 1})
    pairs, skipped = enumerate_pairs(judgments, ["q1"])
    assert pairs == [] and skipped == 1


def test_enumerate_pairs_nav_never_appears():
    judgments = Judgments({("q1", "d1"): 4, ("q1", "d2"): 0, ("q1", "d3"): 2})
    pairs, _ = enumerate_pairs(judgments, ["q1"])
    docs = {p.pos_doc_id for p in pairs} | {p.neg_doc_id for p in pairs}
    assert "d1" not in docs and len(pairs) == 1


def test_enumerate_pairs_pos_neg_mode():
    judgments = Judgments({("q1", "a"): 2, ("q1", "b"): 1, ("q1", "c"): 0})
    pairs, _ = enumerate_pairs(judgments, ["q1"], mode="pos_neg")
    combos = {(p.pos_grade, p.neg_grade) for p in pairs}
    assert combos == {(2, 0), (1, 0)}
    with pytest.raises(ConfigError):
        enumerate_pairs(judgments, ["q1"], mode="weird")


def test_sampling_is_uniform_over_pairs():
    judgments = Judgments({("q1", "d1"): 2, ("q1", "d2"): 1, ("q1", "d3"): 0})
    rng = np.random.default_rng(4)
    stream = sample_pairs(judgments, ["q1"], rng)
    counts = {}
    n = 10_000
    for _ in range(n):
        p = next(stream)
        counts[(p.pos_doc_id, p.neg_doc_id)] = counts.get((p.pos_doc_id, p.neg_doc_id), 0) + 1
    assert set(counts) == {("d1", "d2"), ("d1", "d3"), ("d2", "d3")}
    expected = n / 3
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    assert chi2 < 13.82  # chi-square 2 dof at p=0.001


def test_sampled_pairs_always_dominate(small_world):
    corpus, judgments, _ = small_world
    rng = np.random.default_rng(0)
    sampler = PairSampler(judgments, sorted(corpus.query_texts))
    for _ in range(10_000):
        p = sampler.draw(rng)
        assert p.pos_grade > p.neg_grade
        assert judgments.merged_grade(p.query_id, p.pos_doc_id) == p.pos_grade
        assert judgments.merged_grade(p.query_id, p.neg_doc_id) == p.neg_grade


def test_sampler_needs_at_least_one_pair():
    judgments = Judgments({("q1", "d1"): 1})
    with pytest.raises(DataError):
        PairSampler(judgments, ["q1"])


# ---------------------------------------------------------------------------
# optimizer and iteration mechanics
# ---------------------------------------------------------------------------


def test_zero_learning_rate_leaves_params_bit_identical(small_world):
    corpus, judgments, provider = small_world
    tcfg = TrainConfig(
        learning_rate=0.0, batch_size=4, batches_per_iteration=2, iterations=1, seed=3
    )
    state = TrainState.fresh(MODEL, tcfg)
    before = {k: v.copy() for k, v in state.params.arrays.items()}
    sampler = PairSampler(judgments, sorted(corpus.query_texts))
    train_iteration(state, sampler, provider, MODEL, tcfg)
    for name, arr in state.params.arrays.items():
        assert np.array_equal(arr, before[name])


def test_single_pair_overfit_drives_loss_down(small_world):
    from dataclasses import replace

    corpus, judgments, provider = small_world
    tcfg = TrainConfig(batch_size=1, batches_per_iteration=8, iterations=200, seed=1)
    cfg = replace(MODEL, shuffle=False)  # fixed target: optimizer sanity only
    sampler = PairSampler(judgments, [sorted(corpus.query_texts)[0]])
    sampler.pairs = sampler.pairs[:1]
    state = TrainState.fresh(cfg, tcfg)
    last = None
    for _ in range(tcfg.iterations):
        last = train_iteration(state, sampler, provider, cfg, tcfg)
    assert last < 1e-3


def test_identical_seeds_give_identical_checkpoints(small_world):
    corpus, judgments, provider = small_world
    qids = sorted(corpus.query_texts)

    def run():
        tcfg = TrainConfig(batch_size=4, batches_per_iteration=3, iterations=2, seed=77)
        state = TrainState.fresh(MODEL, tcfg)
        sampler = PairSampler(judgments, qids)
        for _ in range(tcfg.iterations):
            train_iteration(state, sampler, provider, MODEL, tcfg)
        return state.params.checksum()

    assert run() == run()


def test_worker_pool_reduction_matches_sequential(small_world):
    from concurrent.futures import ThreadPoolExecutor

    corpus, judgments, provider = small_world

    def run(workers):
        tcfg = TrainConfig(
            batch_size=6, batches_per_iteration=2, iterations=2, seed=13, workers=workers
        )
        state = TrainState.fresh(MODEL, tcfg)
        sampler = PairSampler(judgments, sorted(corpus.query_texts))
        pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        try:
            for _ in range(tcfg.iterations):
                train_iteration(state, sampler, provider, MODEL, tcfg, pool)
        finally:
            if pool:
                pool.shutdown()
        return state.params.checksum()

    assert run(1) == run(3)


def test_embeddings_are_frozen_by_training(small_world):
    corpus, judgments, provider = small_world
    table_bytes_before = {
        t: corpus.table.lookup(t).tobytes() for t in corpus.table.terms()
    }
    tcfg = TrainConfig(batch_size=4, batches_per_iteration=2, iterations=2, seed=0)
    state = TrainState.fresh(MODEL, tcfg)
    sampler = PairSampler(judgments, sorted(corpus.query_texts))
    for _ in range(tcfg.iterations):
        train_iteration(state, sampler, provider, MODEL, tcfg)
    for term, blob in table_bytes_before.items():
        assert corpus.table.lookup(term).tobytes() == blob


def test_loss_trend_on_fixed_pair_set(small_world):
    # No per-iteration monotonicity; the trailing-10 mean must sit below
    # the leading-10 mean on a fixed 64-pair population.
    corpus, judgments, provider = small_world
    sampler = PairSampler(judgments, sorted(corpus.query_texts))
    sampler.pairs = sampler.pairs[:64]
    tcfg = TrainConfig(batch_size=8, batches_per_iteration=4, iterations=30, seed=21)
    state = TrainState.fresh(MODEL, tcfg)
    losses = [
        train_iteration(state, sampler, provider, MODEL, tcfg)
        for _ in range(tcfg.iterations)
    ]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_non_finite_values_abort_with_batch_diagnostics(small_world):
    corpus, judgments, provider = small_world
    tcfg = TrainConfig(batch_size=2, batches_per_iteration=1, iterations=1, seed=2)
    state = TrainState.fresh(MODEL, tcfg)
    # finite parameters whose products overflow during the forward pass
    state.params.arrays["dense_0_w"][:] = 1e308
    state.params.arrays["dense_1_w"][:] = 1e308
    sampler = PairSampler(judgments, sorted(corpus.query_texts))
    with pytest.raises(NumericalError, match="q"), np.errstate(over="ignore"):
        train_iteration(state, sampler, provider, MODEL, tcfg)


def test_adam_step_moves_toward_gradient_descent():
    cfg = TrainConfig(learning_rate=0.1)
    params = init_params(MODEL, np.random.default_rng(0))
    state = AdamState.like(params)
    before = params.arrays["dense_2_b"].copy()
    grads = {k: np.ones_like(v) for k, v in params.arrays.items()}
    adam_step(params, grads, state, cfg)
    assert np.all(params.arrays["dense_2_b"] < before)
    assert state.t == 1


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


def test_fold_spec_rejects_role_overlap():
    with pytest.raises(ConfigError):
        FoldSpec("f", ("a", "b"), ("b",), ("c",))


def test_round_robin_folds_cover_all_combinations():
    folds = round_robin_folds(["y1", "y2", "y3", "y4"])
    assert len(folds) == 12  # 4 test choices x 3 validation choices
    for fold in folds:
        assert len(fold.train_groups) == 2
        names = set(fold.train_groups) | set(fold.val_groups) | set(fold.test_groups)
        assert names == {"y1", "y2", "y3", "y4"}


def test_select_best_argmax_and_tie_rules():
    hist = [
        IterationRecord(1, 1.0, 0.1),
        IterationRecord(2, 0.9, 0.3),
        IterationRecord(3, 0.8, 0.2),
    ]
    assert select_best(hist).iteration == 2
    tie = [IterationRecord(i, 0.5, 0.25) for i in (1, 2, 3)]
    assert select_best(tie).iteration == 1


def test_run_fold_requires_validation_queries(small_world):
    corpus, judgments, provider = small_world
    data = FoldData(
        train_queries=sorted(corpus.query_texts)[:4],
        val_queries=[],
        judgments=judgments,
        provider=provider,
        candidates={},
    )
    with pytest.raises(DataError):
        run_fold(data, MODEL, TrainConfig(iterations=1))


def test_run_fold_selects_best_iteration_and_beats_random(small_world, tmp_path):
    corpus, judgments, provider = small_world
    qids = sorted(corpus.query_texts)
    train_q, val_q = qids[:4], qids[4:]
    candidates = {
        qid: sorted(judgments.merged_by_query(qid)) for qid in val_q
    }
    data = FoldData(train_q, val_q, judgments, provider, candidates)
    tcfg = TrainConfig(batch_size=8, batches_per_iteration=4, iterations=8, seed=6)
    ckpt = tmp_path / "best.ckpt"
    result = run_fold(data, MODEL, tcfg, checkpoint_path=str(ckpt))
    assert ckpt.exists()
    assert len(result.history) == 8
    assert result.best_iteration == select_best(result.history).iteration
    assert result.best_val_err == max(r.val_err for r in result.history)

    random_params = init_params(MODEL, np.random.default_rng(12345))
    random_err = validation_err(val_q, data, random_params, MODEL)
    assert result.best_val_err >= random_err


def test_validation_err_uses_stable_candidate_order(small_world):
    corpus, judgments, provider = small_world
    qid = sorted(corpus.query_texts)[0]
    candidates = {qid: sorted(judgments.merged_by_query(qid))}
    data = FoldData([qid], [qid], judgments, provider, candidates)
    params = init_params(MODEL, np.random.default_rng(5))
    a = validation_err([qid], data, params, MODEL)
    b = validation_err([qid], data, params, MODEL)
    assert a == b
