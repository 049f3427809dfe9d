import itertools

import numpy as np
import pytest

from copacrr import numerics as nm
from copacrr.embedding import SimInput
from copacrr.errors import ConfigError, DataError
from copacrr.model import (
    ModelConfig,
    VARIANT_ORDER,
    VARIANT_TOGGLES,
    build_graph,
    forward,
    init_params,
    load_checkpoint,
    make_param_nodes,
    parameter_count,
    parameter_shapes,
    permutation_sensitivity,
    plain_reference_score,
    pooled_feature_width,
    save_checkpoint,
    score_from_features,
    score_inference,
)
from copacrr.numerics import Tensor

from conftest import finite_diff, rel_error

TINY = dict(l_q=3, l_d=8, l_g=3, n_f=2, n_s=3, n_c=2, w_c=2, hidden_sizes=(16, 16))


def tiny_config(**kw) -> ModelConfig:
    merged = {**TINY, **kw}
    return ModelConfig(**merged)


def random_input(config: ModelConfig, rng, q_len=None, d_len=None) -> SimInput:
    q_len = q_len if q_len is not None else config.l_q - 1 or 1
    d_len = d_len if d_len is not None else config.l_d
    sim = np.zeros((config.l_q, config.l_d))
    sim[:q_len, :d_len] = rng.uniform(-1, 1, (q_len, d_len))
    qsim = np.zeros(config.l_d)
    qsim[:d_len] = rng.uniform(-1, 1, d_len)
    idf = np.zeros(config.l_q)
    weights = rng.uniform(0.1, 1.0, q_len)
    idf[:q_len] = weights / weights.sum()
    return SimInput(Tensor(sim), Tensor(qsim), q_len, d_len, Tensor(idf))


# ---------------------------------------------------------------------------
# configuration and shapes
# ---------------------------------------------------------------------------


def test_pooled_feature_width_examples():
    assert pooled_feature_width(ModelConfig()) == 73  # 3*3*2*4 + 1
    toy = ModelConfig(l_q=3, l_d=8, l_g=3, n_s=2, n_c=2)
    assert pooled_feature_width(toy) == 25  # 24 signals + idf
    plain = ModelConfig(cascade=False, disamb=False, shuffle=False)
    assert pooled_feature_width(plain) == 10  # 3*3 + idf


def test_cpos_equal_intervals():
    assert ModelConfig(n_c=4).cpos == [0.25, 0.5, 0.75, 1.0]
    assert ModelConfig(n_c=2).cpos == [0.5, 1.0]
    assert ModelConfig(n_c=5).cpos == [0.2, 0.4, 0.6, 0.8, 1.0]
    assert ModelConfig(cascade=False).cpos == [1.0]


def test_cascade_boundaries_use_ceiling():
    cfg = ModelConfig(l_d=10, n_c=3)
    assert cfg.cascade_boundaries() == [4, 7, 10]


def test_variant_names_and_toggles():
    assert set(VARIANT_ORDER) == {
        "PACRR",
        "C-PACRR",
        "D-PACRR",
        "S-PACRR",
        "CD-PACRR",
        "CS-PACRR",
        "DS-PACRR",
        "Co-PACRR",
    }
    co = ModelConfig().with_variant("Co-PACRR")
    assert (co.cascade, co.disamb, co.shuffle) == (True, True, True)
    assert ModelConfig().with_variant("CS-PACRR").variant_name == "CS-PACRR"
    with pytest.raises(ConfigError):
        ModelConfig().with_variant("Q-PACRR")


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(l_q=0)
    with pytest.raises(ConfigError):
        ModelConfig(loss="poisson")
    ModelConfig(w_c=0)  # zero half-window is legal


def test_parameter_count_matches_feature_width_for_all_variants(rng):
    for cascade, disamb, shuffle in itertools.product([False, True], repeat=3):
        cfg = tiny_config(cascade=cascade, disamb=disamb, shuffle=shuffle)
        params = init_params(cfg, rng)
        dense_in = params.arrays["dense_0_w"].shape[0]
        assert dense_in == cfg.l_q * pooled_feature_width(cfg)
        total = sum(a.size for a in params.arrays.values())
        assert total == parameter_count(cfg)
        # forward must accept the matching input
        out = forward(random_input(cfg, rng), params, cfg)
        assert np.isfinite(out.rel)


def test_init_is_deterministic_under_seed():
    cfg = tiny_config()
    a = init_params(cfg, np.random.default_rng(5))
    b = init_params(cfg, np.random.default_rng(5))
    assert a.checksum() == b.checksum()


# ---------------------------------------------------------------------------
# reduction identities
# ---------------------------------------------------------------------------


def test_single_segment_cascade_equals_cascade_off_bitwise(rng):
    on = tiny_config(cascade=True, n_c=1)
    off = tiny_config(cascade=False, n_c=1)
    params = init_params(on, np.random.default_rng(2))
    for _ in range(20):
        si = random_input(on, rng)
        assert forward(si, params, on).rel == forward(si, params, off).rel


def test_toggles_off_equals_reference_path_bitwise(rng):
    cfg = tiny_config(cascade=False, disamb=False, shuffle=False)
    params = init_params(cfg, np.random.default_rng(3))
    for _ in range(20):
        si = random_input(cfg, rng)
        assert forward(si, params, cfg).rel == plain_reference_score(si, params, cfg)


# ---------------------------------------------------------------------------
# forward behavior
# ---------------------------------------------------------------------------


def test_zero_input_depends_only_on_idf(rng):
    cfg = tiny_config(shuffle=False)
    params = init_params(cfg, rng)
    idf = Tensor(np.array([0.5, 0.5, 0.0]))
    zero_a = SimInput(Tensor.zeros(3, 8), Tensor.zeros(8), 2, 4, idf)
    zero_b = SimInput(Tensor.zeros(3, 8), Tensor.zeros(8), 2, 7, idf)
    assert forward(zero_a, params, cfg).rel == forward(zero_b, params, cfg).rel


def test_disamb_off_ignores_querysim(rng):
    cfg = tiny_config(disamb=False, shuffle=False)
    params = init_params(cfg, rng)
    si = random_input(cfg, rng)
    perturbed = SimInput(
        si.sim,
        Tensor(np.clip(si.querysim.values + 0.25, -1, 1)),
        si.q_len,
        si.d_len,
        si.idf_norm,
    )
    assert forward(si, params, cfg).rel == forward(perturbed, params, cfg).rel


def test_disamb_on_reads_querysim(rng):
    cfg = tiny_config(disamb=True, shuffle=False)
    params = init_params(cfg, rng)
    si = random_input(cfg, rng)
    perturbed = SimInput(
        si.sim,
        Tensor(np.clip(si.querysim.values * -0.5 + 0.3, -1, 1)),
        si.q_len,
        si.d_len,
        si.idf_norm,
    )
    assert forward(si, params, cfg).rel != forward(perturbed, params, cfg).rel


def test_forward_is_deterministic(rng):
    cfg = tiny_config()
    params = init_params(cfg, rng)
    si = random_input(cfg, rng)
    assert forward(si, params, cfg).rel == forward(si, params, cfg).rel


def test_score_inference_equals_identity_permutation(rng):
    cfg = tiny_config(shuffle=True)
    params = init_params(cfg, rng)
    si = random_input(cfg, rng)
    ident = forward(si, params, cfg, shuffle_perm=np.arange(cfg.l_q)).rel
    assert score_inference(si, params, cfg) == ident


def test_shuffle_perm_rejected_when_component_off(rng):
    cfg = tiny_config(shuffle=False)
    params = init_params(cfg, rng)
    with pytest.raises(ConfigError):
        forward(random_input(cfg, rng), params, cfg, shuffle_perm=np.array([2, 1, 0]))


def test_forward_rejects_mismatched_input_shape(rng):
    cfg = tiny_config()
    params = init_params(cfg, rng)
    other = tiny_config(l_d=9)
    with pytest.raises(ConfigError):
        forward(random_input(other, rng), params, cfg)


def test_shuffle_equivariance_exact(rng):
    cfg = tiny_config(shuffle=True)
    params = init_params(cfg, rng)
    si = random_input(cfg, rng)
    out = forward(si, params, cfg, with_trace=True)
    for _ in range(20):
        perm = rng.permutation(cfg.l_q)
        shuffled = forward(si, params, cfg, shuffle_perm=perm).rel
        recombined = score_from_features(out.trace.features[perm], params, cfg)
        assert shuffled == recombined


def test_cascade_trace_prefix_top1_is_monotone(rng):
    cfg = tiny_config(cascade=True, n_c=2, shuffle=False)
    params = init_params(cfg, rng)
    for _ in range(20):
        si = random_input(cfg, rng)
        trace = forward(si, params, cfg, with_trace=True).trace
        for g, vals in trace.pooled_values.items():
            # vals: (l_q, n_seg, n_s); the full-document segment is last
            top1 = vals[:, :, 0]
            assert np.all(top1[:, -1] >= top1[:, :-1].max(axis=1) - 1e-15)


def test_trace_positions_map_into_document(rng):
    cfg = tiny_config()
    params = init_params(cfg, rng)
    si = random_input(cfg, rng)
    trace = forward(si, params, cfg, with_trace=True).trace
    bounds = cfg.cascade_boundaries()
    for g, pos in trace.pooled_positions.items():
        for s, b in enumerate(bounds):
            seg = pos[:, s, :]
            assert np.all(seg[seg >= 0] < b)
        if cfg.disamb:
            ctx = trace.context_values[g]
            gathered = np.where(
                pos[:, :, :] >= 0,
                si.querysim.values[np.clip(pos, 0, None)],
                0.0,
            )
            assert np.array_equal(ctx, gathered)


def test_end_to_end_gradient_tiny_config(rng):
    cfg = tiny_config(n_f=2, hidden_sizes=(8,))
    params = init_params(cfg, np.random.default_rng(11))
    si = random_input(cfg, rng, q_len=3, d_len=8)
    perm = np.array([2, 0, 1])

    nodes = make_param_nodes(params)
    rel = build_graph(si, nodes, cfg, perm)
    nm.backward(rel)

    for name in ("conv_2", "dense_0_w"):
        arr = params.arrays[name]

        def f(x):
            saved = params.arrays[name]
            params.arrays[name] = x
            try:
                return forward(si, params, cfg, shuffle_perm=perm).rel
            finally:
                params.arrays[name] = saved

        numeric = finite_diff(f, arr.copy())
        analytic = nodes[name].grad
        assert rel_error(analytic, numeric) < 1e-3


# ---------------------------------------------------------------------------
# diagnostics and checkpoints
# ---------------------------------------------------------------------------


def test_permutation_sensitivity_reports(rng):
    cfg = tiny_config()
    params = init_params(cfg, rng)
    si = random_input(cfg, rng)
    out = permutation_sensitivity(si, params, cfg, n_perms=8, rng=rng)
    assert out["std"] >= 0.0
    assert out["min"] <= out["mean"] <= out["max"]


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = tiny_config(hidden_sizes=(4, 4), loss="max_margin")
    params = init_params(cfg, rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), params, cfg)
    loaded, cfg2 = load_checkpoint(str(path))
    assert cfg2 == cfg
    for name, arr in params.arrays.items():
        assert np.array_equal(loaded.arrays[name], arr.astype(np.float32).astype(np.float64))
    # byte-stable: saving the loaded params reproduces the file exactly
    path2 = tmp_path / "model2.ckpt"
    save_checkpoint(str(path2), loaded, cfg2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path, rng):
    cfg = tiny_config()
    params = init_params(cfg, rng)
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), params, cfg)
    blob = bytearray(path.read_bytes())
    blob[-6] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="checksum"):
        load_checkpoint(str(path))


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(str(path))


def test_declared_parameter_order_is_stable():
    cfg = tiny_config()
    names = [name for name, _ in parameter_shapes(cfg)]
    assert names == [
        "conv_2",
        "conv_3",
        "dense_0_w",
        "dense_0_b",
        "dense_1_w",
        "dense_1_b",
        "dense_2_w",
        "dense_2_b",
    ]
