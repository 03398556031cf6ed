"""End-to-end gradient verification of whole architectures at toy dims."""

from __future__ import annotations

import numpy as np

from .gradcheck import GradCheckReport, grad_check
from .models import ModelConfig, build_params, forward, multilabel_loss
from .tensor import Tensor

__all__ = ["toy_config", "check_architecture"]


def toy_config(architecture: str) -> ModelConfig:
    """Small extents where finite differencing a full forward is affordable."""
    return ModelConfig(
        architecture=architecture,
        labels=5,
        feature_video=8,
        feature_audio=4,
        clusters=2,
        hidden=12,
        heads=2,
        projected_size=3,
        experts=2,
        frames=6,
    )


def check_architecture(architecture: str, seed: int = 0, tol: float = 1e-4,
                       sample_per_tensor: int = 12,
                       input_samples: int = 24):
    """grad_check the full loss against every parameter tensor and the input.

    Runs in inference mode (running statistics act as constants, keeping the
    probed function pure); training-mode batch statistics are covered by the
    per-layer checks. Coordinates are subsampled per tensor, with different
    draws per seed. Returns [(name, GradCheckReport), ...].
    """
    rng = np.random.default_rng(seed)
    config = toy_config(architecture)
    params = build_params(config, rng)
    frames = Tensor(rng.standard_normal(
        (config.frames, config.feature_video + config.feature_audio)))
    targets = np.zeros(config.labels)
    targets[rng.choice(config.labels, size=2, replace=False)] = 1.0

    def input_loss(t):
        return multilabel_loss(forward(params, t, training=False), targets)

    reports = [("input", grad_check(input_loss, frames, tol=tol,
                                    sample=input_samples, rng=rng))]

    for name, tensor in params.named_tensors().items():
        base = tensor.data.copy()

        def param_loss(t, _tensor=tensor):
            # Route the probe through the model's own parameter storage; the
            # tape pass receives the parameter tensor itself, so its gradient
            # is read back directly.
            _tensor.data[...] = t.data
            return multilabel_loss(forward(params, frames, training=False),
                                   targets)

        report = grad_check(param_loss, tensor, tol=tol,
                            sample=sample_per_tensor, rng=rng)
        tensor.data[...] = base
        reports.append((name, report))
    return reports
