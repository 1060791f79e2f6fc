#!/usr/bin/env python3
"""
Training loop: Adam on the saliency (+ contour) objective with a step
learning-rate schedule, per-epoch checkpoints and a JSONL step log.

Outputs under the run directory:
    epoch_000.swck ...   one checkpoint per epoch, batch-norm statistics refreshed first
    best.json            names the checkpoint with the lowest mean training loss
    train_log.jsonl      one TrainingLogRecord per optimizer step
"""

import itertools
import json
import logging
import math
import pathlib
import time
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from data_pipeline import Batch, Sample, iter_batches
from network_blocks import NetworkState, assemble_network, forward, refresh_running_stats, save_state
from objectives import AlphaCache, AlphaMap, LossConfig, LossReport, total_loss
from run_config import RunConfig, ScheduleConfig
from tensor_engine import ComputationTape, Tensor, backward_pass

logger = logging.getLogger(__name__)

SALIENCY_TERMS = ("wbce", "wiou", "wl1", "ssim")


class NumericalError(RuntimeError):
    """A loss or gradient became NaN/Inf."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class Adam:
    """Adam with bias correction over the trainable tensors of a NetworkState."""

    def __init__(self, state: NetworkState, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        params = state.parameters()
        self.m = {path: np.zeros_like(t.data) for path, t in params.items()}
        self.v = {path: np.zeros_like(t.data) for path, t in params.items()}
        self.t = 0

    def step(self, state: NetworkState, grads: Dict[str, np.ndarray], lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        for path, grad in grads.items():
            self.m[path] = self.beta1 * self.m[path] + (1 - self.beta1) * grad
            self.v[path] = self.beta2 * self.v[path] + (1 - self.beta2) * (grad ** 2)
            m_hat = self.m[path] / (1 - self.beta1 ** self.t)
            v_hat = self.v[path] / (1 - self.beta2 ** self.t)
            current = state.params[path]
            updated = current.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            state.replace(path, Tensor(updated, requires_grad=True, dtype=current.dtype))


def learning_rate(epoch: int, base_lr: float, schedule: ScheduleConfig) -> float:
    """Constant, then multiplied by the drop factor from ``lr_drop_epoch`` (0-based) on."""
    return base_lr * (schedule.lr_drop_factor if epoch >= schedule.lr_drop_epoch else 1.0)


@dataclass
class TrainingLogRecord:
    step: int
    epoch: int
    lr: float
    total: float
    terms: Dict[str, float]
    wall_ms: float

    @property
    def saliency_total(self) -> float:
        return sum(self.terms[name] for name in SALIENCY_TERMS)

    def to_json(self) -> str:
        payload = {"step": self.step, "epoch": self.epoch, "lr": self.lr, "total": self.total}
        payload.update(self.terms)
        payload["wall_ms"] = round(self.wall_ms, 3)
        return json.dumps(payload)


@dataclass
class TrainingResult:
    state: NetworkState
    records: List[TrainingLogRecord] = field(default_factory=list)
    checkpoints: List[pathlib.Path] = field(default_factory=list)
    best_checkpoint: Optional[pathlib.Path] = None


def batch_alpha(batch: Batch, window: int, cache: AlphaCache) -> AlphaMap:
    """Alpha maps looked up per image so repeated samples hit the cache."""
    masks = batch.masks.data
    maps = [cache.get(Tensor(masks[i:i + 1]), window).weights.data for i in range(masks.shape[0])]
    return AlphaMap(Tensor(np.concatenate(maps)), window)


def train_step(
    state: NetworkState,
    optimizer: Adam,
    batch: Batch,
    lr: float,
    loss_config: LossConfig,
    cache: AlphaCache,
    step: int = 0,
) -> LossReport:
    """
    One forward/backward/update cycle.

    Raises:
        NumericalError: when the loss or any gradient is not finite
    """
    params = state.parameters()
    alpha = batch_alpha(batch, loss_config.alpha_window, cache)
    with ComputationTape() as tape:
        saliency, contour = forward(state, batch.images, training=True)
        contours = batch.contours if contour is not None else None
        report = total_loss(saliency, contour, batch.masks, contours, loss_config, alpha)
    if not math.isfinite(report.value.item()):
        logger.error(f"Non-finite loss at step {step}: {report.terms}")
        raise NumericalError(f"loss became {report.value.item()} at step {step}", step)

    by_id = backward_pass(tape, report.value)
    grads = {}
    for path, tensor in params.items():
        grad = by_id.get(tensor.id)
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            logger.error(f"Non-finite gradient for {path} at step {step}")
            raise NumericalError(f"gradient of {path} is not finite at step {step}", step)
        grads[path] = grad
    optimizer.step(state, grads, lr)
    return report


def _epoch_batches(samples: Sequence[Sample], config: RunConfig, epoch: int) -> Iterator[Batch]:
    steps = config.data.steps_per_epoch
    seed = config.data.seed
    if steps is None:
        yield from iter_batches(samples, config.data.batch_size, seed, epoch)
        return
    produced, sweep = 0, 0
    while produced < steps:
        for batch in iter_batches(samples, config.data.batch_size, seed, epoch * 100003 + sweep):
            yield batch
            produced += 1
            if produced == steps:
                return
        sweep += 1


def _refresh_images(samples: Sequence[Sample], config: RunConfig, epoch: int) -> Iterator[Tensor]:
    batches = iter_batches(samples, config.data.batch_size, config.data.seed, epoch)
    for batch in itertools.islice(batches, config.schedule.stats_refresh_batches):
        yield batch.images


def train(config: RunConfig, samples: Sequence[Sample], out_dir: pathlib.Path) -> TrainingResult:
    """Train from a fresh seeded initialisation; returns the final state and the step log."""
    if not samples:
        raise ValueError("training needs at least one sample")
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = assemble_network(config.network, seed=config.seed)
    opt = config.optimizer
    optimizer = Adam(state, opt.lr, opt.beta1, opt.beta2, opt.epsilon)
    cache = AlphaCache()
    result = TrainingResult(state)
    best_loss = math.inf
    step = 0

    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log_file:
        for epoch in range(config.schedule.epochs):
            lr = learning_rate(epoch, opt.lr, config.schedule)
            epoch_totals = []
            for batch in _epoch_batches(samples, config, epoch):
                started = time.perf_counter()
                report = train_step(state, optimizer, batch, lr, config.loss, cache, step)
                record = TrainingLogRecord(
                    step, epoch, lr, report.total, dict(report.terms),
                    (time.perf_counter() - started) * 1000.0,
                )
                log_file.write(record.to_json() + "\n")
                result.records.append(record)
                epoch_totals.append(record.total)
                logger.debug(f"step {step} epoch {epoch} lr {lr:g} loss {record.total:.5f}")
                step += 1
            log_file.flush()

            refresh_running_stats(state, _refresh_images(samples, config, epoch))

            checkpoint = out_dir / f"epoch_{epoch:03d}.swck"
            save_state(state, checkpoint)
            result.checkpoints.append(checkpoint)
            mean_loss = float(np.mean(epoch_totals))
            logger.info(f"Epoch {epoch + 1}/{config.schedule.epochs}: mean loss {mean_loss:.5f} (lr {lr:g})")
            if mean_loss < best_loss:
                best_loss = mean_loss
                result.best_checkpoint = checkpoint
                marker = {"checkpoint": checkpoint.name, "epoch": epoch, "mean_loss": mean_loss}
                (out_dir / "best.json").write_text(json.dumps(marker, indent=2) + "\n", encoding="utf-8")

    logger.info(f"Training finished after {step} steps; best checkpoint {result.best_checkpoint}")
    return result
