"""Training loop: schedule handling, metrics, checkpointing, failure policy.

The loop fails loudly: a non-finite loss or an unsolvable preconditioner
raises :class:`NumericalFailure` carrying the offending step, after writing a
failure event to the metrics log.  Silent NaN propagation is a bug.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .curvature import CurvatureOptimizer, make_optimizer
from .data_io import Dataset, MetricsRecord, make_dataset_from_config, save_checkpoint, write_metrics
from .errors import ConfigError, NumericalFailure, SingularMatrixError
from .nn import Model, build_model

__all__ = ["TrainResult", "train", "evaluate", "cosine_lr_factor"]


@dataclass
class TrainResult:
    steps: int
    final_loss: float | None
    final_acc: float | None
    wall_seconds: float
    peak_state_bytes: int
    metrics_path: str
    checkpoint_path: str


def cosine_lr_factor(step_idx: int, total_steps: int) -> float:
    """Half-cosine decay from 1 to ~0 over the run, no restarts."""
    if total_steps <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * (step_idx - 1) / total_steps))


def evaluate(model: Model, ds: Dataset, batch_size: int = 512) -> float:
    """Classification accuracy over a dataset."""
    hits = 0
    for xb, yb in ds.batches(batch_size):
        logits = model.forward(xb, capture=False)
        model._forward_done = False
        hits += int((np.argmax(logits, axis=1) == yb).sum())
    return hits / len(ds)


def train(config: RunConfig, out_dir: str | Path) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    checkpoint_path = out_dir / "final.ckpt"
    metrics_path.unlink(missing_ok=True)

    train_ds = make_dataset_from_config(config.dataset)
    test_ds = None
    if config.test_dataset is not None:
        test_ds = make_dataset_from_config(config.test_dataset)
        if train_ds.feature_mean is not None:
            test_ds = test_ds.apply_normalization(train_ds)

    model = build_model(config.model, seed=config.seed)
    optimizer = make_optimizer(model, config.optimizer)
    if config.optimizer.precompute_first_layer:
        if not isinstance(optimizer, CurvatureOptimizer):
            raise ConfigError("precompute_first_layer requires a curvature optimizer")
        flat = train_ds.x.reshape(len(train_ds), -1)
        if flat.shape[1] != int(np.prod(model.input_shape)) or len(model.input_shape) != 1:
            raise ConfigError("precomputed first-layer factor supports flat inputs only")
        optimizer.prime_first_layer(flat.mean(axis=0))

    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(train_ds) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs

    start = time.perf_counter()
    step_idx = 0
    last_loss: float | None = None
    last_acc: float | None = None
    peak_bytes = 0

    for epoch in range(config.epochs):
        for batch_in_epoch, (xb, yb) in enumerate(train_ds.batches(config.batch_size, rng)):
            step_idx += 1
            if config.lr_schedule == "cosine":
                optimizer.lr_scale = cosine_lr_factor(step_idx, total_steps)
            capture = optimizer.needs_capture(step_idx)
            logits = model.forward(xb, capture=capture)
            loss = model.backward(logits, yb, config.loss)
            if not math.isfinite(loss):
                write_metrics(metrics_path, MetricsRecord(
                    step=step_idx, epoch=epoch, train_loss=float("inf"),
                    wall_ms=(time.perf_counter() - start) * 1e3))
                raise NumericalFailure(f"non-finite loss at step {step_idx}", step=step_idx)
            try:
                optimizer.step(model, step_idx)
            except SingularMatrixError as exc:
                write_metrics(metrics_path, MetricsRecord(
                    step=step_idx, epoch=epoch, train_loss=loss,
                    wall_ms=(time.perf_counter() - start) * 1e3))
                raise NumericalFailure(
                    f"preconditioner failure at step {step_idx}: {exc}", step=step_idx
                ) from exc

            last_loss = loss
            state_bytes = optimizer.state_bytes()
            peak_bytes = max(peak_bytes, sum(state_bytes.values()))
            test_acc = None
            if test_ds is not None and batch_in_epoch == steps_per_epoch - 1:
                test_acc = evaluate(model, test_ds)
                last_acc = test_acc
            write_metrics(metrics_path, MetricsRecord(
                step=step_idx,
                epoch=epoch,
                train_loss=loss,
                test_acc=test_acc,
                wall_ms=(time.perf_counter() - start) * 1e3,
                state_bytes=state_bytes,
            ))

    wall = time.perf_counter() - start
    save_checkpoint(checkpoint_path, model, optimizer,
                    meta={"step": step_idx, "seed": config.seed, "loss": config.loss})
    return TrainResult(
        steps=step_idx,
        final_loss=last_loss,
        final_acc=last_acc,
        wall_seconds=wall,
        peak_state_bytes=peak_bytes,
        metrics_path=str(metrics_path),
        checkpoint_path=str(checkpoint_path),
    )
