"""Training loop writing a per-step metrics log and a final checkpoint."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import checkpoint
from .config import RunConfig
from .data import Utterance, collate
from .errors import DataError, NumericalError
from .model import ModelParams, forward_loss, init_params
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    params: ModelParams
    history: List[dict] = field(default_factory=list)
    skipped_ctc: int = 0
    skipped_degenerate: int = 0


def batch_stream(dataset: Sequence[Utterance], batch_size: int, seed: int):
    """Endless sequence of batches; each epoch is a fresh seeded permutation."""
    rng = np.random.default_rng([seed, 1])
    feat_dim = next((u.features.shape[1] for u in dataset if u.num_frames), 0)
    while True:
        order = rng.permutation(len(dataset))
        for s in range(0, len(order) - batch_size + 1 if len(order) >= batch_size else 1, batch_size):
            yield collate([dataset[i] for i in order[s: s + batch_size]], feat_dim)


def _grads_finite(params: ModelParams) -> bool:
    return all(t.grad is None or np.isfinite(t.grad).all() for t in params.values())


def train(config: RunConfig, dataset: Sequence[Utterance], checkpoint_path=None, metrics_path=None,
          timing_path=None, params: Optional[ModelParams] = None) -> TrainResult:
    """Run ``config.steps`` optimizer steps.

    The metrics log holds only deterministic fields so reruns are
    byte-identical; wall-clock time per step goes to ``timing_path``. A
    non-finite loss or gradient saves the last good parameters and raises
    :class:`NumericalError`.
    """
    if config.steps > 0 and not dataset:
        raise DataError("training set is empty")
    if params is None:
        params = init_params(config.model, config.mode, config.seed)
    opt = Adam(params, config.lr, config.betas, config.eps, config.warmup_steps, config.grad_clip)
    result = TrainResult(params=params)
    metrics = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    timing = open(timing_path, "w", encoding="utf-8") if timing_path else None
    extra = {"run": config.to_dict()}
    try:
        stream = batch_stream(dataset, config.batch_size, config.seed) if config.steps else iter(())
        for step in range(1, config.steps + 1):
            t0 = time.perf_counter()
            b = next(stream)
            params.zero_grad()
            out = forward_loss(params, b, config.lambdas)
            if not math.isfinite(out.breakdown.total):
                _abort(params, checkpoint_path, extra, step, "loss")
            out.total.backward()
            if not _grads_finite(params):
                _abort(params, checkpoint_path, extra, step, "gradient")
            stats = opt.step()
            result.skipped_ctc += len(out.skipped_ctc)
            result.skipped_degenerate += len(out.skipped_degenerate)
            if out.skipped_ctc or out.skipped_degenerate:
                log.warning("step %d: skipped %d CTC-infeasible and %d degenerate utterances",
                            step, len(out.skipped_ctc), len(out.skipped_degenerate))
            row = {"step": step, **out.breakdown.as_dict(), **stats,
                   "skipped_ctc": len(out.skipped_ctc), "skipped_degenerate": len(out.skipped_degenerate)}
            result.history.append(row)
            if metrics:
                metrics.write(json.dumps(row, sort_keys=True) + "\n")
            if timing:
                timing.write(json.dumps({"step": step, "seconds": time.perf_counter() - t0}) + "\n")
    finally:
        if metrics:
            metrics.close()
        if timing:
            timing.close()
    if checkpoint_path:
        checkpoint.save_params(checkpoint_path, params, extra)
    return result


def _abort(params: ModelParams, checkpoint_path, extra: dict, step: int, what: str):
    # Parameters have not been touched by this step yet, so they are the last good ones.
    if checkpoint_path:
        checkpoint.save_params(checkpoint_path, params, {**extra, "aborted_at_step": step})
    raise NumericalError(f"non-finite {what} at step {step}; last good parameters kept"
                         + (f" in {Path(checkpoint_path)}" if checkpoint_path else ""))
