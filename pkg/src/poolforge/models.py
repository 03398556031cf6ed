"""The four pooling architectures plus the mixture-of-experts head.

A model maps one video's sampled frame matrix [N, F_video + F_audio] to
independent per-label probabilities [L]. Video and audio streams are pooled
by separate layer stacks and concatenated before the shared classifier tail
(projection -> context gating -> MoE).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, is_dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import (
    ContextGatingParams,
    NetVladParams,
    SecondOrderParams,
    TransformerParams,
    WhiteningState,
    context_gating,
    glorot,
    init_context_gating,
    init_netvlad,
    init_second_order,
    init_transformer,
    init_whitening,
    netvlad,
    second_order_embed,
    t_embed,
    transformer_encoder,
    transformer_encoder_star,
)
from .tensor import (
    NormState,
    Tensor,
    add,
    concat,
    default_dtype,
    default_eps,
    l2_normalize,
    log,
    matmul,
    mul,
    narrow,
    neg,
    reduce_sum,
    reshape,
    sigmoid,
    softmax,
    sub,
)

ARCHITECTURES = (
    "baseline_netvlad",
    "attention_enhanced",
    "attention_netvlad",
    "second_order_fa",
)

__all__ = [
    "ARCHITECTURES",
    "ModelConfig",
    "ModelParams",
    "MoeParams",
    "build_params",
    "forward",
    "moe_head",
    "multilabel_loss",
    "top_k_predictions",
]


@dataclass(frozen=True)
class ModelConfig:
    architecture: str
    labels: int
    feature_video: int = 1024
    feature_audio: int = 128
    clusters: int = 8
    hidden: int = 1024
    heads: int = 4
    projected_size: int = 8
    experts: int = 2
    frames: int = 256

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(
                f"unknown architecture '{self.architecture}'; "
                f"expected one of {ARCHITECTURES}"
            )
        for name in ("labels", "feature_video", "feature_audio", "clusters",
                     "hidden", "heads", "projected_size", "experts", "frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got "
                                  f"{getattr(self, name)}")
        if self.architecture in ("attention_enhanced", "attention_netvlad"):
            for name in ("feature_video", "feature_audio"):
                if getattr(self, name) % self.heads != 0:
                    raise ConfigError(
                        f"{name}={getattr(self, name)} not divisible by "
                        f"heads={self.heads}"
                    )
        if self.architecture == "attention_enhanced" and self.clusters < 2:
            raise ConfigError(
                "attention_enhanced needs clusters >= 2 for the cluster-level "
                "encoder's batch normalization"
            )
        if self.architecture == "second_order_fa":
            if self.projected_size >= min(self.feature_video,
                                          self.feature_audio):
                raise ConfigError(
                    f"projected_size={self.projected_size} must be below both "
                    f"feature widths ({self.feature_video}, "
                    f"{self.feature_audio})"
                )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, table: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(table) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        try:
            return cls(**table)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from None


@dataclass
class MoeParams:
    """Per-label gated sigmoid experts with one extra dummy gate slot."""

    gate_weight: Tensor  # [D, L * (E + 1)]
    gate_bias: Tensor  # [L * (E + 1)]
    expert_weight: Tensor  # [D, L * E]
    expert_bias: Tensor  # [L * E]

    def tensors(self) -> dict:
        return {"gate_weight": self.gate_weight, "gate_bias": self.gate_bias,
                "expert_weight": self.expert_weight,
                "expert_bias": self.expert_bias}

    def states(self) -> dict:
        return {}


def init_moe(rng, width: int, labels: int, experts: int, dtype=None) -> MoeParams:
    dtype = dtype if dtype is not None else default_dtype()
    return MoeParams(
        gate_weight=Tensor(glorot(rng, (width, labels * (experts + 1)), dtype)),
        gate_bias=Tensor(np.zeros(labels * (experts + 1), dtype=dtype)),
        expert_weight=Tensor(glorot(rng, (width, labels * experts), dtype)),
        expert_bias=Tensor(np.zeros(labels * experts, dtype=dtype)),
    )


def moe_head(v: Tensor, params: MoeParams, experts: int, labels: int) -> Tensor:
    """Per label: sum_e gate_e(v) * sigmoid(expert_e(v)), gates softmax over
    the E experts plus one dummy slot that contributes probability zero."""
    gates = softmax(
        reshape(add(matmul(v, params.gate_weight), params.gate_bias),
                (labels, experts + 1)),
        axis=1,
    )
    expert_probs = sigmoid(
        reshape(add(matmul(v, params.expert_weight), params.expert_bias),
                (labels, experts))
    )
    dummy = Tensor(np.zeros((labels, 1), dtype=v.dtype))
    padded = concat([expert_probs, dummy], axis=1)  # [L, E + 1]
    return reduce_sum(mul(gates, padded), axis=1)


# ---------------------------------------------------------------------------
# Per-modality stacks
# ---------------------------------------------------------------------------


@dataclass
class BaselineStack:
    vlad: NetVladParams


@dataclass
class AttentionEnhancedStack:
    frame_encoder: TransformerParams
    vlad: NetVladParams
    cluster_encoder: TransformerParams


@dataclass
class AttentionNetVladStack:
    frame_encoder: TransformerParams
    similarity_encoder: TransformerParams  # feed-forward projects to C
    vlad: NetVladParams


@dataclass
class SecondOrderStack:
    residual_centers: NetVladParams
    whitening: WhiteningState
    second_order: SecondOrderParams


def _pooled_width(config: ModelConfig, feature: int) -> int:
    c = config.clusters
    if config.architecture == "second_order_fa":
        fp = config.projected_size
        return c * feature + c * (1 + feature + fp * fp)
    return c * feature


def _build_stack(config: ModelConfig, feature: int, rng, dtype):
    arch = config.architecture
    c = config.clusters
    if arch == "baseline_netvlad":
        return BaselineStack(vlad=init_netvlad(rng, feature, c, dtype=dtype))
    if arch == "attention_enhanced":
        return AttentionEnhancedStack(
            frame_encoder=init_transformer(rng, feature, config.heads,
                                           dtype=dtype),
            vlad=init_netvlad(rng, feature, c, dtype=dtype),
            cluster_encoder=init_transformer(rng, feature, config.heads,
                                             dtype=dtype),
        )
    if arch == "attention_netvlad":
        return AttentionNetVladStack(
            frame_encoder=init_transformer(rng, feature, config.heads,
                                           dtype=dtype),
            similarity_encoder=init_transformer(rng, feature, config.heads,
                                                out_width=c, dtype=dtype),
            vlad=init_netvlad(rng, feature, c, dtype=dtype),
        )
    if arch == "second_order_fa":
        return SecondOrderStack(
            residual_centers=init_netvlad(rng, feature, c, dtype=dtype),
            whitening=init_whitening(c * feature, dtype=dtype),
            second_order=init_second_order(rng, feature, config.projected_size,
                                           c, dtype=dtype),
        )
    raise ConfigError(f"unknown architecture '{arch}'")


class ModelParams:
    """Parameter tree plus a flat name -> tensor/buffer view of it.

    Names are slash-joined paths ("video/vlad/cluster_centers"); the flat
    view is what the optimizer and the checkpoint format operate on.
    """

    def __init__(self, config: ModelConfig, video, audio,
                 projection_weight: Tensor, projection_bias: Tensor,
                 gating: ContextGatingParams, moe: MoeParams):
        self.config = config
        self.video = video
        self.audio = audio
        self.projection_weight = projection_weight
        self.projection_bias = projection_bias
        self.gating = gating
        self.moe = moe
        self._tensors: dict[str, Tensor] = {}
        self._states: dict[str, object] = {}
        for prefix, node in (("video", video), ("audio", audio),
                             ("gating", gating), ("moe", moe)):
            self._collect(prefix, node)
        self._tensors["projection/weight"] = projection_weight
        self._tensors["projection/bias"] = projection_bias

    def _collect(self, prefix: str, node) -> None:
        if hasattr(node, "tensors"):
            for name, t in node.tensors().items():
                self._tensors[f"{prefix}/{name}"] = t
            for name, s in node.states().items():
                key = f"{prefix}/{name}" if name else prefix
                self._states[key] = s
        elif is_dataclass(node):
            for f in fields(node):
                child = getattr(node, f.name)
                if isinstance(child, (NormState, WhiteningState)):
                    self._states[f"{prefix}/{f.name}"] = child
                else:
                    self._collect(f"{prefix}/{f.name}", child)
        else:
            raise ConfigError(f"cannot collect parameters under '{prefix}'")

    def named_tensors(self) -> dict:
        return dict(self._tensors)

    def named_buffers(self) -> dict:
        table = {}
        for prefix, state in self._states.items():
            for name, arr in state.buffers().items():
                table[f"{prefix}/{name}"] = arr
        return table

    def load_arrays(self, tensors: dict, buffers: dict) -> None:
        """Overwrite parameter and buffer storage in place (shapes must match)."""
        missing = set(self._tensors) - set(tensors)
        extra = set(tensors) - set(self._tensors)
        if missing or extra:
            raise ConfigError(
                f"parameter names do not match checkpoint: missing "
                f"{sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}"
            )
        for name, tensor in self._tensors.items():
            arr = tensors[name]
            if arr.shape != tensor.shape:
                raise ConfigError(
                    f"checkpoint shape {arr.shape} != expected {tensor.shape} "
                    f"for '{name}'"
                )
            tensor.data[...] = arr
        own = self.named_buffers()
        if set(own) != set(buffers):
            raise ConfigError("buffer names do not match checkpoint")
        for name, arr in own.items():
            arr[...] = buffers[name]


def build_params(config: ModelConfig, rng=None, dtype=None) -> ModelParams:
    """Initialize every parameter of one architecture deterministically."""
    rng = rng if rng is not None else np.random.default_rng(0)
    dtype = dtype if dtype is not None else default_dtype()
    video = _build_stack(config, config.feature_video, rng, dtype)
    audio = _build_stack(config, config.feature_audio, rng, dtype)
    pooled = (_pooled_width(config, config.feature_video)
              + _pooled_width(config, config.feature_audio))
    return ModelParams(
        config=config,
        video=video,
        audio=audio,
        projection_weight=Tensor(glorot(rng, (pooled, config.hidden), dtype)),
        projection_bias=Tensor(np.zeros(config.hidden, dtype=dtype)),
        gating=init_context_gating(rng, config.hidden, dtype=dtype),
        moe=init_moe(rng, config.hidden, config.labels, config.experts,
                     dtype=dtype),
    )


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _vlad_flatten(vlad_out: Tensor) -> Tensor:
    """Intra-normalize cluster rows, flatten, then global L2."""
    c, f = vlad_out.shape
    flat = reshape(l2_normalize(vlad_out, axis=1), (c * f,))
    return l2_normalize(flat, axis=0)


def _pool_baseline(frames: Tensor, stack: BaselineStack, training: bool) -> Tensor:
    return _vlad_flatten(netvlad(frames, stack.vlad))


def _pool_attention_enhanced(frames: Tensor, stack: AttentionEnhancedStack,
                             training: bool) -> Tensor:
    encoded = transformer_encoder(frames, stack.frame_encoder, training)
    vlad_out = l2_normalize(netvlad(encoded, stack.vlad), axis=1)  # [C, F]
    refined = transformer_encoder(vlad_out, stack.cluster_encoder, training)
    c, f = refined.shape
    return l2_normalize(reshape(refined, (c * f,)), axis=0)


def _pool_attention_netvlad(frames: Tensor, stack: AttentionNetVladStack,
                            training: bool) -> Tensor:
    encoded = transformer_encoder(frames, stack.frame_encoder, training)
    similarities = softmax(
        transformer_encoder_star(encoded, stack.similarity_encoder, training),
        axis=1,
    )  # [N, C], rows sum to 1
    return _vlad_flatten(netvlad(frames, stack.vlad, similarities=similarities))


def _pool_second_order(frames: Tensor, stack: SecondOrderStack,
                       training: bool) -> Tensor:
    embedded = t_embed(frames, stack.residual_centers, stack.whitening,
                       update_stats=training)
    first = l2_normalize(reduce_sum(embedded, axis=0), axis=0)  # [C*F]
    second = second_order_embed(frames, stack.second_order)
    second = l2_normalize(reduce_sum(second, axis=0), axis=0)
    return concat([first, second])


_POOLERS = {
    "baseline_netvlad": _pool_baseline,
    "attention_enhanced": _pool_attention_enhanced,
    "attention_netvlad": _pool_attention_netvlad,
    "second_order_fa": _pool_second_order,
}


def forward(params: ModelParams, frames: Tensor, training: bool = False) -> Tensor:
    """Map one video's frames [N, F_video + F_audio] to probabilities [L]."""
    config = params.config
    fv, fa = config.feature_video, config.feature_audio
    if frames.ndim != 2 or frames.shape[1] != fv + fa:
        raise DimensionError(
            f"forward expects frames [N, {fv + fa}], got {frames.shape}"
        )
    pool = _POOLERS[config.architecture]
    video = narrow(frames, 1, 0, fv)
    audio = narrow(frames, 1, fv, fa)
    pooled = concat([pool(video, params.video, training),
                     pool(audio, params.audio, training)])
    hidden = add(matmul(pooled, params.projection_weight),
                 params.projection_bias)
    gated = context_gating(hidden, params.gating)
    return moe_head(gated, params.moe, config.experts, config.labels)


def multilabel_loss(probabilities: Tensor, targets: np.ndarray) -> Tensor:
    """Sum of per-label binary cross-entropies, eps-guarded near 0 and 1."""
    eps = default_eps(probabilities.dtype)
    y = Tensor(np.asarray(targets, dtype=probabilities.data.dtype))
    p = probabilities
    positive = mul(y, log(add(p, eps)))
    negative = mul(sub(1.0, y), log(add(sub(1.0, p), eps)))
    return neg(reduce_sum(add(positive, negative)))


def top_k_predictions(probabilities: np.ndarray, k: int = 20):
    """Highest-k (label, confidence) pairs, confidence-descending, stable."""
    order = np.argsort(-probabilities, kind="stable")[:k]
    return [(int(i), float(probabilities[i])) for i in order]
