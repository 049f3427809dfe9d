"""The relevance scorer: convolutional n-gram matching over a similarity
matrix, (optionally cascaded) k-max pooling, optional context-similarity
features, optional row shuffling, and a dense combination stack producing
a scalar score.

The three optional components are toggled independently: `cascade` pools
over successive document prefixes instead of only the whole document,
`disamb` appends the context similarity at each pooled position, and
`shuffle` permutes per-query-term feature rows during training. All eight
toggle combinations share one code path.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nm
from .embedding import SimInput
from .errors import ConfigError, DataError
from .numerics import Node

CHECKPOINT_MAGIC = b"CPKT"
CHECKPOINT_VERSION = 1

VARIANT_TOGGLES = {
    "PACRR": (False, False, False),
    "C-PACRR": (True, False, False),
    "D-PACRR": (False, True, False),
    "S-PACRR": (False, False, True),
    "CD-PACRR": (True, True, False),
    "CS-PACRR": (True, False, True),
    "DS-PACRR": (False, True, True),
    "Co-PACRR": (True, True, True),
}
VARIANT_ORDER = list(VARIANT_TOGGLES)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters plus the component toggles."""

    l_q: int = 16
    l_d: int = 800
    l_g: int = 3
    n_f: int = 32
    n_s: int = 3
    n_c: int = 4
    w_c: int = 4
    hidden_sizes: tuple[int, ...] = (16, 16)
    cascade: bool = True
    disamb: bool = True
    shuffle: bool = True
    loss: str = "cross_entropy"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        for name in ("l_q", "l_d", "l_g", "n_f", "n_s", "n_c", "w_c"):
            if getattr(self, name) < 1 and name != "w_c":
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.w_c < 0:
            raise ConfigError(f"w_c must be >= 0, got {self.w_c}")
        if self.loss not in ("cross_entropy", "max_margin"):
            raise ConfigError(f"unknown loss {self.loss!r}")

    @property
    def cpos(self) -> list[float]:
        """Pooling offsets as fractions, equal intervals ending at 100%."""
        if not self.cascade:
            return [1.0]
        return [s / self.n_c for s in range(1, self.n_c + 1)]

    def cascade_boundaries(self) -> list[int]:
        """Column boundaries ceil(s/n_c * l_d) over the padded length."""
        if not self.cascade:
            return [self.l_d]
        return [-(-s * self.l_d // self.n_c) for s in range(1, self.n_c + 1)]

    def with_variant(self, name: str) -> "ModelConfig":
        if name not in VARIANT_TOGGLES:
            raise ConfigError(f"unknown variant {name!r}")
        c, d, s = VARIANT_TOGGLES[name]
        return replace(self, cascade=c, disamb=d, shuffle=s)

    @property
    def variant_name(self) -> str:
        for name, toggles in VARIANT_TOGGLES.items():
            if toggles == (self.cascade, self.disamb, self.shuffle):
                return name
        raise AssertionError("unreachable")


def pooled_feature_width(config: ModelConfig) -> int:
    """Feature count per query-term row, including the appended idf weight:
    l_g * n_s * (2 if disamb) * (n_c if cascade) + 1."""
    width = config.l_g * config.n_s
    if config.disamb:
        width *= 2
    if config.cascade:
        width *= config.n_c
    return width + 1


def _dense_layer_shapes(config: ModelConfig) -> list[tuple[int, int]]:
    widths = [config.l_q * pooled_feature_width(config)]
    widths += list(config.hidden_sizes)
    widths.append(1)
    return list(zip(widths[:-1], widths[1:]))


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Named parameter tensors in their declared (checkpoint) order."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for g in range(2, config.l_g + 1):
        shapes.append((f"conv_{g}", (g, g, config.n_f)))
    for i, (m, n) in enumerate(_dense_layer_shapes(config)):
        shapes.append((f"dense_{i}_w", (m, n)))
        shapes.append((f"dense_{i}_b", (n,)))
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in parameter_shapes(config))


@dataclass
class ModelParams:
    """All trainable weights, keyed by the declared parameter names."""

    arrays: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def items(self):
        return self.arrays.items()

    def checksum(self) -> int:
        crc = 0
        for name in sorted(self.arrays):
            crc = zlib.crc32(self.arrays[name].tobytes(), crc)
        return crc


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)); biases start at 0.

    Convolution kernels use fan_in = g*g and fan_out = n_f. Draws follow
    the declared parameter order, so a seed pins the whole initialization.
    """
    arrays: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config):
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape)
        elif name.startswith("conv_"):
            g = shape[0]
            limit = np.sqrt(6.0 / (g * g + shape[2]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(arrays)


def _check_params(params: ModelParams, config: ModelConfig) -> None:
    expected = dict(parameter_shapes(config))
    if set(params.arrays) != set(expected):
        missing = sorted(set(expected) - set(params.arrays))
        extra = sorted(set(params.arrays) - set(expected))
        raise ConfigError(f"parameter set mismatch: missing {missing}, extra {extra}")
    for name, arr in params.arrays.items():
        if arr.shape != expected[name]:
            raise ConfigError(
                f"parameter {name} has shape {arr.shape}, expected {expected[name]}"
            )


@dataclass
class Trace:
    """Intermediate pooling results, for diagnostics and invariants.

    pooled_values[g] has shape (l_q, n_segments, n_s); pooled_positions[g]
    matches it with document positions (-1 for padded slots). features is
    the per-row matrix before any shuffling, idf column included.
    """

    pooled_values: dict[int, np.ndarray] = field(default_factory=dict)
    pooled_positions: dict[int, np.ndarray] = field(default_factory=dict)
    context_values: dict[int, np.ndarray] = field(default_factory=dict)
    features: np.ndarray | None = None
    perm: np.ndarray | None = None


@dataclass
class ScoreOutput:
    rel: float
    trace: Trace | None = None


def make_param_nodes(params: ModelParams) -> dict[str, Node]:
    """Fresh gradient-accumulating leaf nodes over the parameter arrays."""
    return {name: nm.parameter(arr) for name, arr in params.arrays.items()}


def build_graph(
    sim_input: SimInput,
    param_nodes: dict[str, Node],
    config: ModelConfig,
    shuffle_perm: np.ndarray | None = None,
    trace: Trace | None = None,
) -> Node:
    """Assemble the scoring graph for one (query, document) pair and return
    the scalar relevance node (shape (1,))."""
    l_q, l_d = config.l_q, config.l_d
    if sim_input.sim.shape != (l_q, l_d):
        raise ConfigError(
            f"sim shape {sim_input.sim.shape} does not match config ({l_q}, {l_d})"
        )
    sim = nm.constant(sim_input.sim.values)
    querysim = nm.constant(sim_input.querysim.values)

    # Pooling sources: the raw similarity matrix is the unigram signal,
    # each conv window size g >= 2 contributes one filter-pooled matrix.
    matrices: dict[int, Node] = {1: sim}
    for g in range(2, config.l_g + 1):
        conv = nm.conv2d_same(sim, param_nodes[f"conv_{g}"])
        matrices[g] = nm.max_over_filters(conv)

    boundaries = config.cascade_boundaries()
    n_seg = len(boundaries)
    parts: list[Node] = []
    for g in range(1, config.l_g + 1):
        vals, positions = nm.cascade_kmax(matrices[g], boundaries, config.n_s)
        parts.append(vals)
        if config.disamb:
            ctx = nm.gather(querysim, positions)
            parts.append(ctx)
        if trace is not None:
            trace.pooled_values[g] = vals.value.values.reshape(l_q, n_seg, config.n_s)
            trace.pooled_positions[g] = positions.reshape(l_q, n_seg, config.n_s)
            if config.disamb:
                trace.context_values[g] = ctx.value.values.reshape(
                    l_q, n_seg, config.n_s
                )

    idf_column = nm.constant(sim_input.idf_norm.values.reshape(l_q, 1))
    features = nm.concat_columns(parts + [idf_column])
    if trace is not None:
        trace.features = features.value.values.copy()

    if shuffle_perm is not None:
        if not config.shuffle:
            raise ConfigError("shuffle_perm given but the shuffle component is off")
        perm = np.asarray(shuffle_perm, dtype=np.int64)
        if trace is not None:
            trace.perm = perm.copy()
        features = nm.permute_rows(features, perm)

    hidden = nm.flatten(features)
    n_layers = len(_dense_layer_shapes(config))
    for i in range(n_layers):
        activation = "relu" if i < n_layers - 1 else "identity"
        hidden = nm.dense(
            hidden,
            param_nodes[f"dense_{i}_w"],
            param_nodes[f"dense_{i}_b"],
            activation,
        )
    return hidden


def forward(
    sim_input: SimInput,
    params: ModelParams,
    config: ModelConfig,
    shuffle_perm: np.ndarray | None = None,
    with_trace: bool = False,
) -> ScoreOutput:
    """Score one (query, document) pair. Deterministic given its arguments;
    a shuffle permutation is supplied only by the training loop."""
    _check_params(params, config)
    trace = Trace() if with_trace else None
    rel = build_graph(sim_input, make_param_nodes(params), config, shuffle_perm, trace)
    return ScoreOutput(rel=float(rel.value.values.reshape(())), trace=trace)


def score_inference(
    sim_input: SimInput, params: ModelParams, config: ModelConfig
) -> float:
    """Inference-time score: identity row order, no shuffling."""
    return forward(sim_input, params, config, shuffle_perm=None).rel


def score_from_features(
    features: np.ndarray, params: ModelParams, config: ModelConfig
) -> float:
    """Apply only the dense combination stack to an already-assembled
    per-row feature matrix (idf column included, no shuffling)."""
    _check_params(params, config)
    expected = (config.l_q, pooled_feature_width(config))
    if features.shape != expected:
        raise ConfigError(
            f"feature matrix shape {features.shape}, expected {expected}"
        )
    param_nodes = make_param_nodes(params)
    hidden = nm.flatten(nm.constant(features))
    n_layers = len(_dense_layer_shapes(config))
    for i in range(n_layers):
        activation = "relu" if i < n_layers - 1 else "identity"
        hidden = nm.dense(
            hidden,
            param_nodes[f"dense_{i}_w"],
            param_nodes[f"dense_{i}_b"],
            activation,
        )
    return float(hidden.value.values.reshape(()))


def permutation_sensitivity(
    sim_input: SimInput,
    params: ModelParams,
    config: ModelConfig,
    n_perms: int = 16,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Diagnostic: spread of scores under random row permutations of the
    feature matrix. No bound is asserted anywhere; this only reports."""
    rng = rng or np.random.default_rng(0)
    trace = Trace()
    build_graph(sim_input, make_param_nodes(params), config, trace=trace)
    scores = []
    for _ in range(n_perms):
        perm = rng.permutation(config.l_q)
        scores.append(score_from_features(trace.features[perm], params, config))
    arr = np.asarray(scores)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "min": float(arr.min()),
        "max": float(arr.max()),
    }


# ---------------------------------------------------------------------------
# Straight-line reference path (no graph), used to pin down the plain
# pipeline: unigram matrix plus conv matrices, whole-document k-max, idf
# append, dense stack. Toggle-free by construction.
# ---------------------------------------------------------------------------


def plain_reference_score(
    sim_input: SimInput, params: ModelParams, config: ModelConfig
) -> float:
    """Independent re-computation of the all-toggles-off forward pass."""
    l_q, l_d = config.l_q, config.l_d
    sim = sim_input.sim.values

    matrices = {1: sim}
    for g in range(2, config.l_g + 1):
        ker = params.arrays[f"conv_{g}"]
        off = g // 2
        padded = np.zeros((l_q + g - 1, l_d + g - 1))
        padded[off : off + l_q, off : off + l_d] = sim
        conv = np.zeros((l_q, l_d, config.n_f))
        for a in range(g):
            for b in range(g):
                conv += padded[a : a + l_q, b : b + l_d, None] * ker[a, b]
        matrices[g] = conv.max(axis=2)

    rows = []
    for i in range(l_q):
        feats: list[float] = []
        for g in range(1, config.l_g + 1):
            row = matrices[g][i]
            top = sorted(range(l_d), key=lambda j: (-row[j], j))[: config.n_s]
            picked = [row[j] for j in top]
            picked += [0.0] * (config.n_s - len(picked))
            feats.extend(picked)
        feats.append(float(sim_input.idf_norm.values[i]))
        rows.append(feats)

    hidden = np.asarray(rows).reshape(-1)
    layers = _dense_layer_shapes(config)
    for i in range(len(layers)):
        hidden = hidden @ params.arrays[f"dense_{i}_w"] + params.arrays[f"dense_{i}_b"]
        if i < len(layers) - 1:
            hidden = np.maximum(hidden, 0.0)
    return float(hidden.reshape(()))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _config_to_json(config: ModelConfig) -> bytes:
    payload = asdict(config)
    payload["hidden_sizes"] = list(config.hidden_sizes)
    return json.dumps(payload, sort_keys=True).encode("utf-8")


def _config_from_json(blob: bytes) -> ModelConfig:
    payload = json.loads(blob.decode("utf-8"))
    payload["hidden_sizes"] = tuple(payload["hidden_sizes"])
    try:
        return ModelConfig(**payload)
    except TypeError as exc:
        raise DataError(f"checkpoint config does not parse: {exc}") from None


def save_checkpoint(path: str, params: ModelParams, config: ModelConfig) -> None:
    """Binary checkpoint: magic ``CPKT``, u32 version, u32 config length,
    the config as JSON, then each parameter tensor in declared order as
    little-endian float32, and a trailing u32 CRC32 over everything after
    the magic."""
    _check_params(params, config)
    body = bytearray()
    cfg = _config_to_json(config)
    body += struct.pack("<II", CHECKPOINT_VERSION, len(cfg))
    body += cfg
    for name, _ in parameter_shapes(config):
        body += params.arrays[name].astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(bytes(body))))


def load_checkpoint(path: str) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic, not a checkpoint")
    body, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise DataError(f"{path}: checksum mismatch")
    version, cfg_len = struct.unpack_from("<II", body, 0)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    config = _config_from_json(bytes(body[8 : 8 + cfg_len]))
    offset = 8 + cfg_len
    arrays: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config):
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=offset)
        arrays[name] = arr.astype(np.float64).reshape(shape)
        offset += 4 * count
    if offset != len(body):
        raise DataError(f"{path}: {len(body) - offset} trailing bytes")
    return ModelParams(arrays), config
