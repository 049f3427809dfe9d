"""Minimal reverse-mode differentiation engine for the scoring pipeline.

Dense numpy storage with explicit graph nodes, and exactly the operations
the model needs: same-padded 2D convolution, max over the filter axis,
(cascade) k-max pooling that also reports source positions, affine layers,
row permutation, position gathers, concatenation, and the two pairwise
loss heads. No broadcasting, no ops beyond these.

Gradient conventions that matter downstream:
  * ties in max / k-max go to the lowest index, and the gradient is routed
    to that index only;
  * k-max on rows shorter than k pads values with 0 and positions with -1,
    and padded slots receive no gradient;
  * the hinge loss uses subgradient 0 at the kink.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError

_checked = True


def set_checked(flag: bool) -> None:
    """Globally enable or disable finiteness checks at Tensor construction."""
    global _checked
    _checked = bool(flag)


def is_checked() -> bool:
    return _checked


class Tensor:
    """Dense row-major array of float64 values.

    Invariants: the number of stored values equals the product of the shape,
    and in checked mode (the default) NaN/Inf are rejected at construction.
    """

    __slots__ = ("values",)

    def __init__(self, values, shape: Sequence[int] | None = None):
        arr = np.asarray(values, dtype=np.float64)
        if shape is not None:
            expected = int(np.prod(shape)) if len(shape) else 1
            if arr.size != expected:
                raise ShapeError(
                    f"cannot view {arr.size} values as shape {tuple(shape)}"
                )
            arr = arr.reshape(tuple(shape))
        if _checked and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed with non-finite values")
        self.values = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @classmethod
    def zeros(cls, *shape: int) -> "Tensor":
        return cls(np.zeros(shape))

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Node:
    """Computation-graph node: a value, its lazily allocated gradient, and
    references to the input nodes together with the backward rule."""

    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad")

    def __init__(
        self,
        value: Tensor | np.ndarray | float,
        parents: tuple["Node", ...] = (),
        backward_rule: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool | None = None,
    ):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_rule = backward_rule
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return self.value.item()


def constant(values) -> Node:
    """Leaf node that never receives a gradient (model inputs)."""
    return Node(values, requires_grad=False)


def parameter(values) -> Node:
    """Leaf node whose gradient is accumulated by backward()."""
    return Node(values, requires_grad=True)


def _accumulate(node: Node, delta: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.value.values)
    node.grad += delta


def _topo_order(root: Node) -> list[Node]:
    # Iterative DFS; each node appears once, parents before children.
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node, seed: np.ndarray | None = None) -> None:
    """Reverse-mode accumulation from `root` into every parameter's .grad.

    Without a seed the root must be a single value (its gradient is 1);
    a seed of the root's shape differentiates seed-weighted sums.
    """
    if seed is None:
        if root.value.size != 1:
            raise ShapeError(
                f"backward() without seed needs a scalar root, got shape {root.shape}"
            )
        seed = np.ones_like(root.value.values)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.value.shape:
            raise ShapeError(
                f"seed shape {seed.shape} does not match root shape {root.shape}"
            )
    root.grad = seed.copy()
    for node in reversed(_topo_order(root)):
        if node.backward_rule is not None and node.grad is not None:
            node.backward_rule(node.grad)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def conv2d_same(image: Node, kernels: Node) -> Node:
    """Zero-padded 'same' 2D convolution of an (r, c) image with (g, g, n_f)
    kernels, producing (r, c, n_f):

        out[i, j, f] = sum_{a,b} image[i+a-g//2, j+b-g//2] * kernels[a, b, f]

    with out-of-range image cells read as zero. Differentiable in both
    arguments.
    """
    img = image.value.values
    ker = kernels.value.values
    if img.ndim != 2:
        raise ShapeError(f"conv2d_same image must be 2-D, got shape {img.shape}")
    if ker.ndim != 3:
        raise ShapeError(f"conv2d_same kernels must be 3-D, got shape {ker.shape}")
    g = ker.shape[0]
    if ker.shape[1] != g:
        raise ShapeError(
            f"conv2d_same kernels must be square, got {ker.shape[0]}x{ker.shape[1]}"
        )
    if g < 2:
        raise ShapeError(f"conv2d_same window must be >= 2, got {g}")
    rows, cols = img.shape
    n_f = ker.shape[2]
    off = g // 2
    padded = np.zeros((rows + g - 1, cols + g - 1))
    padded[off : off + rows, off : off + cols] = img
    out = np.zeros((rows, cols, n_f))
    for a in range(g):
        for b in range(g):
            out += padded[a : a + rows, b : b + cols, None] * ker[a, b]

    def rule(gout: np.ndarray) -> None:
        if kernels.requires_grad:
            dk = np.empty_like(ker)
            for a in range(g):
                for b in range(g):
                    dk[a, b] = np.einsum(
                        "ij,ijf->f", padded[a : a + rows, b : b + cols], gout
                    )
            _accumulate(kernels, dk)
        if image.requires_grad:
            dpad = np.zeros_like(padded)
            for a in range(g):
                for b in range(g):
                    dpad[a : a + rows, b : b + cols] += gout @ ker[a, b]
            _accumulate(image, dpad[off : off + rows, off : off + cols])

    return Node(out, (image, kernels), rule)


def max_over_filters(x: Node) -> Node:
    """Maximum across the trailing filter axis of an (r, c, n_f) tensor.

    The gradient is routed to the argmax filter only; ties break toward the
    lowest filter index.
    """
    v = x.value.values
    if v.ndim != 3:
        raise ShapeError(f"max_over_filters expects 3-D input, got shape {v.shape}")
    if v.shape[2] < 1:
        raise ShapeError("max_over_filters needs at least one filter")
    arg = np.argmax(v, axis=2)
    out = np.take_along_axis(v, arg[:, :, None], axis=2)[:, :, 0]

    def rule(gout: np.ndarray) -> None:
        if x.requires_grad:
            delta = np.zeros_like(v)
            np.put_along_axis(delta, arg[:, :, None], gout[:, :, None], axis=2)
            _accumulate(x, delta)

    return Node(out, (x,), rule)


def _kmax_prefix(values: np.ndarray, stop: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k of each row's prefix [0, stop), descending, ties to lower index.

    Returns (vals, positions), both (rows, k); short prefixes are padded
    with value 0 and position -1.
    """
    prefix = values[:, :stop]
    rows = prefix.shape[0]
    take = min(k, stop)
    order = np.argsort(-prefix, axis=1, kind="stable")[:, :take]
    vals = np.take_along_axis(prefix, order, axis=1)
    if take < k:
        vals = np.concatenate([vals, np.zeros((rows, k - take))], axis=1)
        order = np.concatenate(
            [order, np.full((rows, k - take), -1, dtype=order.dtype)], axis=1
        )
    return vals, order.astype(np.int64)


def kmax_with_positions(row: Node, k: int) -> tuple[Node, np.ndarray]:
    """The k largest entries of a 1-D row in descending order plus their
    source indices. Rows shorter than k pad values with 0 and positions
    with -1; the backward pass scatters gradient to the source indices and
    padded slots get none.
    """
    v = row.value.values
    if v.ndim != 1:
        raise ShapeError(f"kmax_with_positions expects a 1-D row, got shape {v.shape}")
    if k < 1:
        raise ShapeError(f"kmax_with_positions needs k >= 1, got {k}")
    vals, pos = _kmax_prefix(v[None, :], v.shape[0], k)
    positions = pos[0]

    def rule(gout: np.ndarray) -> None:
        if row.requires_grad:
            delta = np.zeros_like(v)
            valid = positions >= 0
            np.add.at(delta, positions[valid], gout[valid])
            _accumulate(row, delta)

    return Node(vals[0], (row,), rule), positions


def cascade_kmax(matrix: Node, boundaries: Sequence[int], k: int) -> tuple[Node, np.ndarray]:
    """Row-wise k-max pooling over successive column prefixes.

    For each row and each boundary b in `boundaries`, the k largest entries
    of the prefix [0, b) are taken (descending, ties to lower index, short
    prefixes zero-padded with position -1). Returns a value node of shape
    (rows, len(boundaries) * k), segment-major within each row, and the
    matching source-position array.
    """
    v = matrix.value.values
    if v.ndim != 2:
        raise ShapeError(f"cascade_kmax expects a 2-D matrix, got shape {v.shape}")
    if k < 1:
        raise ShapeError(f"cascade_kmax needs k >= 1, got {k}")
    rows, cols = v.shape
    bounds = [int(b) for b in boundaries]
    for b in bounds:
        if not 1 <= b <= cols:
            raise ShapeError(
                f"cascade boundary {b} outside [1, {cols}] for {cols} columns"
            )
    val_parts = []
    pos_parts = []
    for b in bounds:
        vals, pos = _kmax_prefix(v, b, k)
        val_parts.append(vals)
        pos_parts.append(pos)
    out = np.concatenate(val_parts, axis=1)
    positions = np.concatenate(pos_parts, axis=1)

    def rule(gout: np.ndarray) -> None:
        if matrix.requires_grad:
            delta = np.zeros_like(v)
            row_idx = np.repeat(np.arange(rows), positions.shape[1]).reshape(
                positions.shape
            )
            valid = positions >= 0
            np.add.at(delta, (row_idx[valid], positions[valid]), gout[valid])
            _accumulate(matrix, delta)

    return Node(out, (matrix,), rule), positions


def gather(vec: Node, positions: np.ndarray, fill: float = 0.0) -> Node:
    """Read vec[p] for every entry p of `positions`; sentinel positions
    (p < 0) yield `fill`. The backward pass scatter-adds into the vector."""
    v = vec.value.values
    if v.ndim != 1:
        raise ShapeError(f"gather expects a 1-D vector, got shape {v.shape}")
    pos = np.asarray(positions, dtype=np.int64)
    valid = pos >= 0
    out = np.full(pos.shape, fill, dtype=np.float64)
    out[valid] = v[pos[valid]]

    def rule(gout: np.ndarray) -> None:
        if vec.requires_grad:
            delta = np.zeros_like(v)
            np.add.at(delta, pos[valid], gout[valid])
            _accumulate(vec, delta)

    return Node(out, (vec,), rule)


def dense(x: Node, weights: Node, bias: Node, activation: str = "identity") -> Node:
    """Affine map of a 1-D input, `x @ weights + bias`, with an optional
    ReLU. weights is (m, n) for an m-feature input and n outputs."""
    xv = x.value.values
    wv = weights.value.values
    bv = bias.value.values
    if xv.ndim != 1:
        raise ShapeError(f"dense input must be 1-D, got shape {xv.shape}")
    if wv.ndim != 2 or wv.shape[0] != xv.shape[0]:
        raise ShapeError(
            f"dense weights {wv.shape} do not match input of {xv.shape[0]} features"
        )
    if bv.shape != (wv.shape[1],):
        raise ShapeError(
            f"dense bias {bv.shape} does not match {wv.shape[1]} outputs"
        )
    if activation not in ("identity", "relu"):
        raise ValueError(f"unknown activation {activation!r}")
    z = xv @ wv + bv
    out = np.maximum(z, 0.0) if activation == "relu" else z

    def rule(gout: np.ndarray) -> None:
        gz = gout * (z > 0.0) if activation == "relu" else gout
        if weights.requires_grad:
            _accumulate(weights, np.outer(xv, gz))
        if bias.requires_grad:
            _accumulate(bias, gz)
        if x.requires_grad:
            _accumulate(x, wv @ gz)

    return Node(out, (x, weights, bias), rule)


def permute_rows(x: Node, perm: Sequence[int]) -> Node:
    """Reorder the rows of an (r, c) matrix: out[i] = x[perm[i]].

    perm must be a bijection on [0, r); the backward pass applies the
    inverse permutation.
    """
    v = x.value.values
    if v.ndim != 2:
        raise ShapeError(f"permute_rows expects a 2-D matrix, got shape {v.shape}")
    p = np.asarray(perm, dtype=np.int64)
    rows = v.shape[0]
    if p.shape != (rows,) or not np.array_equal(np.sort(p), np.arange(rows)):
        raise ValueError(f"perm is not a bijection on [0, {rows})")
    out = v[p]

    def rule(gout: np.ndarray) -> None:
        if x.requires_grad:
            delta = np.zeros_like(v)
            delta[p] = gout
            _accumulate(x, delta)

    return Node(out, (x,), rule)


def concat_columns(parts: Sequence[Node]) -> Node:
    """Concatenate 2-D nodes with equal row counts along the column axis."""
    if not parts:
        raise ShapeError("concat_columns needs at least one part")
    rows = parts[0].value.shape[0]
    for part in parts:
        v = part.value.values
        if v.ndim != 2 or v.shape[0] != rows:
            raise ShapeError(
                f"concat_columns parts must share {rows} rows, got shape {v.shape}"
            )
    widths = [p.value.shape[1] for p in parts]
    out = np.concatenate([p.value.values for p in parts], axis=1)
    offsets = np.cumsum([0] + widths)

    def rule(gout: np.ndarray) -> None:
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(part, gout[:, lo:hi])

    return Node(out, tuple(parts), rule)


def flatten(x: Node) -> Node:
    """Row-major flattening to 1-D."""
    v = x.value.values
    out = v.reshape(-1)

    def rule(gout: np.ndarray) -> None:
        _accumulate(x, gout.reshape(v.shape))

    return Node(out, (x,), rule)


def _scalar(node: Node, name: str) -> np.ndarray:
    v = node.value.values
    if v.size != 1:
        raise ShapeError(f"{name} expects scalar inputs, got shape {v.shape}")
    return v.reshape(())


def pairwise_ce_loss(rel_pos: Node, rel_neg: Node) -> Node:
    """Cross-entropy preference loss
    -log(exp(rel_pos) / (exp(rel_pos) + exp(rel_neg))), evaluated in the
    shift-stable softplus form."""
    a = _scalar(rel_pos, "pairwise_ce_loss")
    b = _scalar(rel_neg, "pairwise_ce_loss")
    delta = a - b
    loss = np.logaddexp(0.0, -delta)
    sigma = np.exp(-loss)  # = sigmoid(delta), reusing the stable softplus

    def rule(gout: np.ndarray) -> None:
        g = gout.reshape(())
        _accumulate(rel_pos, np.full(rel_pos.value.shape, (sigma - 1.0) * g))
        _accumulate(rel_neg, np.full(rel_neg.value.shape, (1.0 - sigma) * g))

    return Node(np.asarray(loss), (rel_pos, rel_neg), rule)


def pairwise_margin_loss(rel_pos: Node, rel_neg: Node) -> Node:
    """Hinge preference loss max(0, 1 - rel_pos + rel_neg); subgradient 0
    at the kink."""
    a = _scalar(rel_pos, "pairwise_margin_loss")
    b = _scalar(rel_neg, "pairwise_margin_loss")
    margin = 1.0 - a + b
    loss = np.maximum(margin, 0.0)
    active = margin > 0.0

    def rule(gout: np.ndarray) -> None:
        g = gout.reshape(())
        if active:
            _accumulate(rel_pos, np.full(rel_pos.value.shape, -g))
            _accumulate(rel_neg, np.full(rel_neg.value.shape, g))

    return Node(np.asarray(loss), (rel_pos, rel_neg), rule)
