"""Differentiable pooling and attention building blocks.

Every layer is a pure function of (input, params); the only mutable pieces
are running batch-norm / whitening statistics, which are updated exclusively
inside a training step. Shapes follow the per-video convention: a layer sees
one video's frame matrix [N, F] at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import (
    NormState,
    Tensor,
    add,
    batch_norm,
    concat,
    default_dtype,
    default_eps,
    l2_normalize,
    matmul,
    mul,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    tanh,
    transpose,
)

__all__ = [
    "AttentionClusterParams",
    "BatchNormParams",
    "ContextGatingParams",
    "NetVladParams",
    "SecondOrderParams",
    "TransformerParams",
    "WhiteningState",
    "attention_cluster",
    "context_gating",
    "init_attention_cluster",
    "init_context_gating",
    "init_netvlad",
    "init_second_order",
    "init_transformer",
    "init_whitening",
    "multi_head_attention",
    "netvlad",
    "scaled_dot_attention",
    "second_order_embed",
    "t_embed",
    "transformer_encoder",
    "transformer_encoder_star",
]


def glorot(rng: np.random.Generator, shape, dtype=None) -> np.ndarray:
    """Glorot-uniform init over the trailing two extents."""
    dtype = dtype if dtype is not None else default_dtype()
    fan_in, fan_out = shape[-2], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class BatchNormParams:
    """Normalization by running statistics, updated while training.

    A video is one forward call here, so the op-level training branch of
    batch_norm (per-batch statistics) would normalize every video by its own
    moments and diverge from the frozen-statistics inference path. Instead
    the layer always normalizes with the running statistics, folding each
    training batch's moments into them first; training and inference then
    compute the same function up to the slow drift of the statistics.
    """

    scale: Tensor
    shift: Tensor
    state: NormState

    def apply(self, x: Tensor, training: bool) -> Tensor:
        if training:
            self.state.update(x.data)
        return batch_norm(x, self.scale, self.shift, self.state,
                          training=False)

    def tensors(self) -> dict:
        return {"scale": self.scale, "shift": self.shift}

    def states(self) -> dict:
        return {"": self.state}


@dataclass
class AttentionClusterParams:
    """Per-cluster logit network plus the (alpha, beta) shifting scalars."""

    w1: Tensor  # [K, F, H]
    b1: Tensor  # [K, 1, H]
    w2: Tensor  # [K, H, 1]
    b2: Tensor  # [K, 1, 1]
    alpha: Tensor  # [K, 1, 1], nonzero at init
    beta: Tensor  # [K, 1, 1] scalar shift, or [K, 1, F] per-feature

    @property
    def clusters(self) -> int:
        return self.w1.shape[0]

    @property
    def feature_size(self) -> int:
        return self.w1.shape[1]

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "alpha": self.alpha, "beta": self.beta}

    def states(self) -> dict:
        return {}


def init_attention_cluster(rng, feature_size: int, clusters: int,
                           hidden: Optional[int] = None,
                           per_feature_shift: bool = False,
                           dtype=None) -> AttentionClusterParams:
    dtype = dtype if dtype is not None else default_dtype()
    hidden = hidden if hidden is not None else max(feature_size // 2, 1)
    beta_shape = (clusters, 1, feature_size) if per_feature_shift else (clusters, 1, 1)
    return AttentionClusterParams(
        w1=Tensor(glorot(rng, (clusters, feature_size, hidden), dtype)),
        b1=Tensor(np.zeros((clusters, 1, hidden), dtype=dtype)),
        w2=Tensor(glorot(rng, (clusters, hidden, 1), dtype)),
        b2=Tensor(np.zeros((clusters, 1, 1), dtype=dtype)),
        alpha=Tensor(np.ones((clusters, 1, 1), dtype=dtype)),
        beta=Tensor(np.zeros(beta_shape, dtype=dtype)),
    )


@dataclass
class NetVladParams:
    cluster_centers: Tensor  # [C, F]
    assignment_keys: Tensor  # [F, C]
    assignment_bias: Tensor  # [C]

    @property
    def clusters(self) -> int:
        return self.cluster_centers.shape[0]

    @property
    def feature_size(self) -> int:
        return self.cluster_centers.shape[1]

    def tensors(self) -> dict:
        return {"cluster_centers": self.cluster_centers,
                "assignment_keys": self.assignment_keys,
                "assignment_bias": self.assignment_bias}

    def states(self) -> dict:
        return {}


def init_netvlad(rng, feature_size: int, clusters: int, dtype=None) -> NetVladParams:
    if clusters < 1:
        raise ConfigError(f"cluster count must be >= 1, got {clusters}")
    dtype = dtype if dtype is not None else default_dtype()
    centers = rng.standard_normal((clusters, feature_size)) / math.sqrt(feature_size)
    return NetVladParams(
        cluster_centers=Tensor(centers.astype(dtype)),
        assignment_keys=Tensor(glorot(rng, (feature_size, clusters), dtype)),
        assignment_bias=Tensor(np.zeros(clusters, dtype=dtype)),
    )


@dataclass
class TransformerParams:
    """One encoder block: joint Q/K/V projections, heads, and feed-forward."""

    wq: Tensor  # [F, F]
    wk: Tensor  # [F, F]
    wv: Tensor  # [F, F]
    wo: Tensor  # [F, F]
    ff_w1: Tensor  # [F, inner]
    ff_b1: Tensor  # [inner]
    ff_w2: Tensor  # [inner, out] -- out == F for the standard block
    ff_b2: Tensor  # [out]
    heads: int
    bn_q: Optional[BatchNormParams] = None
    bn_k: Optional[BatchNormParams] = None
    bn_v: Optional[BatchNormParams] = None

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @property
    def out_width(self) -> int:
        return self.ff_w2.shape[1]

    def tensors(self) -> dict:
        table = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo,
                 "ff_w1": self.ff_w1, "ff_b1": self.ff_b1,
                 "ff_w2": self.ff_w2, "ff_b2": self.ff_b2}
        for name, bn in (("bn_q", self.bn_q), ("bn_k", self.bn_k),
                         ("bn_v", self.bn_v)):
            if bn is not None:
                for key, t in bn.tensors().items():
                    table[f"{name}/{key}"] = t
        return table

    def states(self) -> dict:
        table = {}
        for name, bn in (("bn_q", self.bn_q), ("bn_k", self.bn_k),
                         ("bn_v", self.bn_v)):
            if bn is not None:
                table[name] = bn.state
        return table


def init_transformer(rng, width: int, heads: int, out_width: Optional[int] = None,
                     ff_inner: Optional[int] = None, use_batch_norm: bool = True,
                     dtype=None) -> TransformerParams:
    if width % heads != 0:
        raise ConfigError(f"model width {width} not divisible by {heads} heads")
    dtype = dtype if dtype is not None else default_dtype()
    out_width = out_width if out_width is not None else width
    ff_inner = ff_inner if ff_inner is not None else 2 * width

    def bn():
        if not use_batch_norm:
            return None
        return BatchNormParams(
            scale=Tensor(np.ones(width, dtype=dtype)),
            shift=Tensor(np.zeros(width, dtype=dtype)),
            state=NormState(width, dtype=dtype),
        )

    return TransformerParams(
        wq=Tensor(glorot(rng, (width, width), dtype)),
        wk=Tensor(glorot(rng, (width, width), dtype)),
        wv=Tensor(glorot(rng, (width, width), dtype)),
        wo=Tensor(glorot(rng, (width, width), dtype)),
        ff_w1=Tensor(glorot(rng, (width, ff_inner), dtype)),
        ff_b1=Tensor(np.zeros(ff_inner, dtype=dtype)),
        ff_w2=Tensor(glorot(rng, (ff_inner, out_width), dtype)),
        ff_b2=Tensor(np.zeros(out_width, dtype=dtype)),
        heads=heads,
        bn_q=bn(),
        bn_k=bn(),
        bn_v=bn(),
    )


class WhiteningState:
    """Running diagonal statistics of the concatenated residual embedding."""

    def __init__(self, width: int, momentum: float = 0.99, eps: float = 1e-6,
                 dtype=None):
        dtype = dtype if dtype is not None else default_dtype()
        self.running_mean = np.zeros(width, dtype=dtype)
        self.running_var = np.ones(width, dtype=dtype)
        self.momentum = float(momentum)
        self.eps = float(eps)

    def update(self, rows: np.ndarray) -> None:
        """Fold one batch of embedding rows into the running statistics."""
        m = self.momentum
        mean = rows.mean(axis=0)
        var = rows.var(axis=0)
        self.running_mean[...] = m * self.running_mean + (1.0 - m) * mean
        new_var = m * self.running_var + (1.0 - m) * var
        # Variance entries stay >= eps so the diagonal stays invertible.
        self.running_var[...] = np.maximum(new_var, self.eps)

    def buffers(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_buffers(self, table: dict) -> None:
        self.running_mean[...] = table["running_mean"]
        self.running_var[...] = table["running_var"]


def init_whitening(width: int, momentum: float = 0.99, dtype=None) -> WhiteningState:
    return WhiteningState(width, momentum=momentum, dtype=dtype)


@dataclass
class SecondOrderParams:
    """Projection to a smaller space plus separate second-order clusters."""

    projection: Tensor  # [F, F'], F' < F
    centers: Tensor  # [C, F']
    keys: Tensor  # [F', C]
    bias: Tensor  # [C]
    first_order: NetVladParams

    @property
    def projected_size(self) -> int:
        return self.projection.shape[1]

    def tensors(self) -> dict:
        table = {"projection": self.projection, "centers": self.centers,
                 "keys": self.keys, "bias": self.bias}
        for key, t in self.first_order.tensors().items():
            table[f"first_order/{key}"] = t
        return table

    def states(self) -> dict:
        return {}


def init_second_order(rng, feature_size: int, projected_size: int, clusters: int,
                      dtype=None) -> SecondOrderParams:
    if projected_size >= feature_size:
        raise ConfigError(
            f"projection must reduce dimensionality: {projected_size} >= "
            f"{feature_size}"
        )
    dtype = dtype if dtype is not None else default_dtype()
    centers = rng.standard_normal((clusters, projected_size))
    centers /= math.sqrt(projected_size)
    return SecondOrderParams(
        projection=Tensor(glorot(rng, (feature_size, projected_size), dtype)),
        centers=Tensor(centers.astype(dtype)),
        keys=Tensor(glorot(rng, (projected_size, clusters), dtype)),
        bias=Tensor(np.zeros(clusters, dtype=dtype)),
        first_order=init_netvlad(rng, feature_size, clusters, dtype=dtype),
    )


@dataclass
class ContextGatingParams:
    weight: Tensor  # [D, D]
    bias: Tensor  # [D]

    def tensors(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def states(self) -> dict:
        return {}


def init_context_gating(rng, width: int, dtype=None) -> ContextGatingParams:
    dtype = dtype if dtype is not None else default_dtype()
    return ContextGatingParams(
        weight=Tensor(glorot(rng, (width, width), dtype)),
        bias=Tensor(np.zeros(width, dtype=dtype)),
    )


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def attention_cluster(x: Tensor, params: AttentionClusterParams) -> Tensor:
    """Concatenated shifted attention summaries, one per cluster.

    Per cluster: frame logits from a two-layer network, softmax over the N
    frames, then the shifted weighted sum (alpha * aX + beta) normalized to
    length 1/sqrt(N). Output is the [K*F] concatenation.
    """
    n, f = x.shape
    if f != params.feature_size:
        raise DimensionError(
            f"attention_cluster: input width {f} != params width "
            f"{params.feature_size}"
        )
    k = params.clusters
    hidden = tanh(add(matmul(x, params.w1), params.b1))  # [K, N, H]
    logits = add(matmul(hidden, params.w2), params.b2)  # [K, N, 1]
    weights = softmax(reshape(logits, (k, n)), axis=1)  # [K, N]
    summary = matmul(reshape(weights, (k, 1, n)), x)  # [K, 1, F]
    shifted = add(mul(params.alpha, summary), params.beta)
    psi = mul(l2_normalize(shifted, axis=2), 1.0 / math.sqrt(n))
    return reshape(psi, (k * f,))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V for 2-d or head-batched 3-d inputs."""
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"scaled_dot_attention: {k.shape} keys vs {v.shape} values"
        )
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(
            f"scaled_dot_attention: query width {q.shape} vs key width {k.shape}"
        )
    d = q.shape[-1]
    scores = mul(matmul(q, transpose(k, _swap_last_two(k.ndim))),
                 1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def _swap_last_two(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, f = x.shape
    return transpose(reshape(x, (n, heads, f // heads)), (1, 0, 2))  # [H, N, d]


def _merge_heads(x: Tensor) -> Tensor:
    h, n, d = x.shape
    return reshape(transpose(x, (1, 0, 2)), (n, h * d))  # [N, H*d]


def multi_head_attention(x: Tensor, params: TransformerParams,
                         training: bool = False) -> Tensor:
    """Self-attention over frames with batch-normalized Q/K/V projections."""
    n, f = x.shape
    if f != params.width:
        raise ConfigError(
            f"multi_head_attention: input width {f} != configured width "
            f"{params.width}"
        )
    q = matmul(x, params.wq)
    k = matmul(x, params.wk)
    v = matmul(x, params.wv)
    if params.bn_q is not None:
        q = params.bn_q.apply(q, training)
        k = params.bn_k.apply(k, training)
        v = params.bn_v.apply(v, training)
    heads = params.heads
    attended = scaled_dot_attention(
        _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    )
    return matmul(_merge_heads(attended), params.wo)


def _feed_forward(x: Tensor, params: TransformerParams) -> Tensor:
    hidden = relu(add(matmul(x, params.ff_w1), params.ff_b1))
    return add(matmul(hidden, params.ff_w2), params.ff_b2)


def transformer_encoder(x: Tensor, params: TransformerParams,
                        training: bool = False) -> Tensor:
    """Encoder block: attention + residual, feed-forward + residual. [N,F]->[N,F]."""
    if params.out_width != params.width:
        raise ConfigError(
            "transformer_encoder requires a feed-forward that preserves width; "
            f"got {params.out_width} != {params.width}"
        )
    attended = add(multi_head_attention(x, params, training), x)
    return add(_feed_forward(attended, params), attended)


def transformer_encoder_star(x: Tensor, params: TransformerParams,
                             training: bool = False) -> Tensor:
    """Encoder variant projecting to cluster count: the feed-forward maps to
    C and the final residual connection is dropped. [N,F] -> [N,C]."""
    attended = add(multi_head_attention(x, params, training), x)
    return _feed_forward(attended, params)


def netvlad(x: Tensor, params: NetVladParams,
            similarities: Optional[Tensor] = None,
            temperature: float = 1.0) -> Tensor:
    """Soft-assigned residual sums: out[j] = sum_k a_j(x_k) (x_k - c_j).

    Assignments come from softmax(temperature * (x . keys + bias)) unless a
    row-stochastic similarity matrix is supplied. Output is [C, F];
    intra-normalization and flattening happen at the model level.
    """
    n, f = x.shape
    if f != params.feature_size:
        raise DimensionError(
            f"netvlad: input width {f} != params width {params.feature_size}"
        )
    c = params.clusters
    if similarities is None:
        logits = add(matmul(x, params.assignment_keys), params.assignment_bias)
        assign = softmax(mul(logits, float(temperature)), axis=1)  # [N, C]
    else:
        if similarities.shape != (n, c):
            raise DimensionError(
                f"netvlad: similarities shape {similarities.shape} != ({n}, {c})"
            )
        row_sums = similarities.data.sum(axis=1)
        if np.max(np.abs(row_sums - 1.0)) > 1e-6:
            raise ContractError(
                "netvlad: similarity rows must sum to 1 within 1e-6"
            )
        assign = similarities
    weighted = matmul(transpose(assign), x)  # [C, F]
    mass = reshape(reduce_sum(assign, axis=0), (c, 1))
    return sub(weighted, mul(mass, params.cluster_centers))


def t_embed(x: Tensor, params: NetVladParams, white: WhiteningState,
            update_stats: bool = False) -> Tensor:
    """Whitened concatenation of unit-normalized residuals to each center.

    Per descriptor: r_j = l2_normalize(x_i - c_j), concatenated over the K
    centers and then de-biased / de-scaled by the running diagonal statistics
    (held constant under differentiation). `update_stats` folds the current
    batch into those statistics first.
    """
    n, f = x.shape
    k = params.clusters
    residuals = sub(reshape(x, (n, 1, f)), reshape(params.cluster_centers, (1, k, f)))
    normalized = l2_normalize(residuals, axis=2)
    flat = reshape(normalized, (n, k * f))
    if update_stats:
        white.update(flat.data)
    inv_std = 1.0 / np.sqrt(np.maximum(white.running_var, white.eps))
    return mul(sub(flat, Tensor(white.running_mean.copy())),
               Tensor(inv_std))


def second_order_embed(x: Tensor, params: SecondOrderParams) -> Tensor:
    """Per-descriptor embedding [a_j; a_j v_ij; a~_j flat(v~ v~^T)] over clusters.

    Zeroth and first-order terms use full-space assignments and residuals;
    the second-order outer product uses the projected space with its own
    cluster centers and assignments. Output width is C * (1 + F + F'^2).
    """
    n, f = x.shape
    first = params.first_order
    c = first.clusters
    fp = params.projected_size

    logits = add(matmul(x, first.assignment_keys), first.assignment_bias)
    assign = softmax(logits, axis=1)  # [N, C]
    residual = sub(reshape(x, (n, 1, f)),
                   reshape(first.cluster_centers, (1, c, f)))  # [N, C, F]

    projected = matmul(x, params.projection)  # [N, F']
    logits2 = add(matmul(projected, params.keys), params.bias)
    assign2 = softmax(logits2, axis=1)  # [N, C]
    residual2 = sub(reshape(projected, (n, 1, fp)),
                    reshape(params.centers, (1, c, fp)))  # [N, C, F']
    outer = mul(reshape(residual2, (n, c, fp, 1)),
                reshape(residual2, (n, c, 1, fp)))  # [N, C, F', F']

    a_col = reshape(assign, (n, c, 1))
    a2_col = reshape(assign2, (n, c, 1))
    blocks = concat(
        [a_col, mul(a_col, residual), mul(a2_col, reshape(outer, (n, c, fp * fp)))],
        axis=2,
    )  # [N, C, 1 + F + F'^2]
    return reshape(blocks, (n, c * (1 + f + fp * fp)))


def context_gating(x: Tensor, params: ContextGatingParams) -> Tensor:
    """Elementwise re-weighting: sigmoid(W x + b) * x."""
    gate = sigmoid(add(matmul(x, params.weight), params.bias))
    return mul(gate, x)
