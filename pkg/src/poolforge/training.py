"""Adam optimization loop, checkpoint/resume, and dataset evaluation.

Training is per-video: each step samples a batch of videos, runs the model
forward on each video's sampled frames, averages the per-video multilabel
losses, and takes one Adam step. Everything downstream of the seed is
deterministic, so identical configs produce bit-identical checkpoints and a
resumed run replays the exact loss sequence of an uninterrupted one.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt_io
from .dataio import load_corpus, split, uniform_sample
from .errors import ConfigError, DataError, NumericError
from .evalmetrics import EvalReport, PredictionSet, gap_at_20, per_class_ap
from .models import (
    ModelConfig,
    ModelParams,
    build_params,
    forward,
    multilabel_loss,
    top_k_predictions,
)
from .tensor import Gradients, Tape, Tensor, default_dtype, mul, set_default_dtype

logger = logging.getLogger(__name__)

__all__ = ["AdamState", "TrainConfig", "TrainResult", "adam_step", "evaluate",
           "evaluate_records", "train"]


@dataclass
class TrainConfig:
    model: ModelConfig
    data_manifest: str
    learning_rate: float = 3e-4
    batch_size: int = 8
    max_steps: int = 2000
    seed: int = 0
    holdout_fraction: float = 0.02
    checkpoint_interval: int = 500
    eval_interval: int = 500
    log_interval: int = 50
    precision: str = "float64"
    output_dir: str = "poolforge_run"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got "
                              f"{self.learning_rate}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch size must be >= 2 (batch-norm constraint), got "
                f"{self.batch_size}"
            )
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(
                f"precision must be float32 or float64, got "
                f"'{self.precision}'"
            )
        for name in ("checkpoint_interval", "eval_interval", "log_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (0.0 < self.holdout_fraction < 1.0):
            raise ConfigError("holdout_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        table = {f.name: getattr(self, f.name) for f in fields(self)
                 if f.name != "model"}
        table["model"] = self.model.to_dict()
        return table

    @classmethod
    def from_dict(cls, table: dict) -> "TrainConfig":
        table = dict(table)
        model_table = table.pop("model", None)
        if model_table is None:
            raise ConfigError("config is missing the 'model' section")
        known = {f.name for f in fields(cls)}
        unknown = set(table) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        try:
            return cls(model=ModelConfig.from_dict(model_table), **table)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from None


class AdamState:
    """First/second moment estimates per named parameter, plus step count."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: dict, grads, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update over a named-parameter table.

    Parameters without a recorded gradient (dead branches) are skipped; a
    non-finite gradient aborts, naming the parameter path.
    """
    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, tensor in params.items():
        if isinstance(grads, Gradients):
            grad = grads.get(tensor)
        else:
            grad = grads.get(name)
        if grad is None:
            continue
        if not np.isfinite(grad).all():
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainResult:
    params: ModelParams
    checkpoint_path: Optional[Path]
    losses: list  # (step, loss) for every step taken in this call
    eval_history: list  # (step, holdout GAP)
    final_train_gap: Optional[float] = None


def _multi_hot(labels, count: int, dtype) -> np.ndarray:
    out = np.zeros(count, dtype=dtype)
    for label in labels:
        if label >= count:
            raise DataError(
                f"label {label} outside configured label count {count}"
            )
        out[label] = 1.0
    return out


def _prepare_examples(records, model_config: ModelConfig, dtype):
    """Sample frames once per record; inputs are deterministic per video."""
    examples = []
    for record in records:
        frames = uniform_sample(record, model_config.frames).astype(dtype)
        width = model_config.feature_video + model_config.feature_audio
        if frames.shape[1] != width:
            raise DataError(
                f"record '{record.id}' has feature width {frames.shape[1]}, "
                f"model expects {width}"
            )
        targets = _multi_hot(record.labels, model_config.labels, dtype)
        examples.append((record.id, Tensor(frames), targets))
    return examples


def _predictions_for(params: ModelParams, examples) -> PredictionSet:
    predictions = []
    truth = []
    for _, frames, targets in examples:
        probs = forward(params, frames, training=False).data
        predictions.append(top_k_predictions(probs))
        truth.append(set(np.nonzero(targets)[0].tolist()))
    return PredictionSet(predictions=predictions, ground_truth=truth)


def _report_from(preds: PredictionSet, num_videos: int) -> EvalReport:
    zero = preds.total_positives == 0
    return EvalReport(
        gap=gap_at_20(preds) if not zero else 0.0,
        per_class=per_class_ap(preds),
        num_videos=num_videos,
        num_positives=preds.total_positives,
        zero_positives=zero,
    )


def evaluate_records(params: ModelParams, records):
    """Inference-mode GAP@20 and per-class AP; returns (report, ids, preds)."""
    if not records:
        raise DataError("cannot evaluate an empty dataset")
    examples = _prepare_examples(records, params.config,
                                 params.projection_weight.data.dtype)
    preds = _predictions_for(params, examples)
    video_ids = [record.id for record in records]
    return _report_from(preds, len(records)), video_ids, preds


def evaluate(checkpoint_path, records):
    """Evaluate a checkpoint on records; returns (report, ids, preds).

    The model is rebuilt at the checkpoint's stored precision so a reload
    reproduces training-time outputs bit for bit.
    """
    stored = ckpt_io.load_checkpoint(checkpoint_path)
    try:
        model_config = ModelConfig.from_dict(stored.config)
    except ConfigError as exc:
        raise ConfigError(f"checkpoint '{checkpoint_path}': {exc}") from None
    dtype = next(iter(stored.params.values())).dtype if stored.params \
        else np.float64
    previous = default_dtype()
    set_default_dtype(dtype)
    try:
        params = build_params(model_config, np.random.default_rng(0))
        params.load_arrays(stored.params, stored.buffers)
    finally:
        set_default_dtype(previous)
    return evaluate_records(params, records)


def _save_state(path, params: ModelParams, adam: AdamState, rng, step: int):
    state = ckpt_io.Checkpoint(
        config=params.config.to_dict(),
        step=step,
        rng_state=rng.bit_generator.state,
        params={k: v.data for k, v in params.named_tensors().items()},
        buffers=params.named_buffers(),
        adam_m=dict(adam.m),
        adam_v=dict(adam.v),
    )
    ckpt_io.save_checkpoint(path, state)


def train(config: TrainConfig, resume: Optional[str] = None,
          output_dir: Optional[str] = None) -> TrainResult:
    """Run the optimization loop; returns params plus loss/eval history.

    Checkpoints land in `output_dir` (falling back to config.output_dir;
    pass output_dir="" to disable writing): "step_<n>.ckpt" plus a trailing
    "final.ckpt". `resume` restores parameters, optimizer moments, running
    statistics, and the RNG, so the continued loss sequence is bit-identical
    to an uninterrupted run with the same seed.
    """
    previous_dtype = default_dtype()
    set_default_dtype(np.float32 if config.precision == "float32"
                      else np.float64)
    resolved = output_dir if output_dir is not None else config.output_dir
    try:
        return _train_inner(config, resume, resolved if resolved else None)
    finally:
        set_default_dtype(previous_dtype)


def _train_inner(config: TrainConfig, resume, output_dir) -> TrainResult:
    dtype = default_dtype()
    corpus = load_corpus(config.data_manifest)
    if not corpus:
        raise DataError(f"manifest '{config.data_manifest}' lists no records")
    train_records, holdout_records = split(corpus, config.holdout_fraction,
                                           seed=config.seed)
    if not train_records:
        raise DataError("holdout left no training records")
    examples = _prepare_examples(train_records, config.model, dtype)
    holdout_examples = _prepare_examples(holdout_records, config.model, dtype)

    rng = np.random.Generator(np.random.PCG64(config.seed))
    params = build_params(config.model, rng)
    adam = AdamState(params.named_tensors())
    start_step = 0

    if resume is not None:
        stored = ckpt_io.load_checkpoint(resume)
        if stored.config != config.model.to_dict():
            raise ConfigError(
                f"checkpoint '{resume}' was trained with a different model "
                f"config"
            )
        params.load_arrays(stored.params, stored.buffers)
        for name in adam.m:
            if name not in stored.adam_m:
                raise ConfigError(
                    f"checkpoint '{resume}' lacks optimizer state for '{name}'"
                )
            adam.m[name][...] = stored.adam_m[name]
            adam.v[name][...] = stored.adam_v[name]
        adam.step_count = stored.step
        start_step = stored.step
        if start_step > config.max_steps:
            raise ConfigError(
                f"checkpoint is at step {start_step}, past max_steps "
                f"{config.max_steps}"
            )
        if stored.rng_state is not None:
            rng.bit_generator.state = stored.rng_state
        logger.info("resumed from %s at step %d", resume, start_step)

    out_dir = Path(output_dir) if output_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    named = params.named_tensors()
    losses = []
    eval_history = []
    started = time.monotonic()

    if config.max_steps == 0 and out_dir is not None:
        _save_state(out_dir / "final.ckpt", params, adam, rng, step=0)
        return TrainResult(params=params,
                           checkpoint_path=out_dir / "final.ckpt",
                           losses=[], eval_history=[])

    for step in range(start_step + 1, config.max_steps + 1):
        indices = rng.integers(0, len(examples), size=config.batch_size)
        with Tape() as tape:
            total = None
            for index in indices:
                _, frames, targets = examples[index]
                probs = forward(params, frames, training=True)
                loss_i = multilabel_loss(probs, targets)
                total = loss_i if total is None else total + loss_i
            batch_loss = mul(total, 1.0 / config.batch_size)
        grads = tape.backward(batch_loss)
        adam_step(named, grads, adam, config.learning_rate)
        loss_value = batch_loss.item()
        losses.append((step, loss_value))

        if step % config.log_interval == 0 or step == config.max_steps:
            logger.info("step %d/%d loss %.5f (%.1fs)", step,
                        config.max_steps, loss_value,
                        time.monotonic() - started)
        if holdout_examples and (step % config.eval_interval == 0
                                 or step == config.max_steps):
            preds = _predictions_for(params, holdout_examples)
            gap = gap_at_20(preds) if preds.total_positives else 0.0
            eval_history.append((step, gap))
            logger.info("step %d holdout GAP %.4f", step, gap)
        if out_dir is not None and step % config.checkpoint_interval == 0 \
                and step != config.max_steps:
            _save_state(out_dir / f"step_{step}.ckpt", params, adam, rng, step)

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = out_dir / "final.ckpt"
        _save_state(checkpoint_path, params, adam, rng, config.max_steps)

    final_train_gap = None
    if examples:
        preds = _predictions_for(params, examples)
        if preds.total_positives:
            final_train_gap = gap_at_20(preds)

    return TrainResult(params=params, checkpoint_path=checkpoint_path,
                       losses=losses, eval_history=eval_history,
                       final_train_gap=final_train_gap)
