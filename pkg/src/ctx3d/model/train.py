"""Minibatch SGD training with the step learning-rate schedule."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from ..nn import SGD, Tape
from .checkpoint import save_checkpoint
from .network import Model, forward_train

logger = logging.getLogger(__name__)

TRACE_FIELDS = ["iter", "epoch", "lr", "rpn_cls", "rpn_reg", "head_cls", "head_reg", "total"]


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TraceRow:
    iter: int
    epoch: int
    lr: float
    rpn_cls: float
    rpn_reg: float
    head_cls: float
    head_reg: float
    total: float


def train(
    model: Model,
    samples: Sequence[tuple[np.ndarray, np.ndarray]],
    seed: int,
    epochs: int | None = None,
    checkpoint_dir: str | None = None,
    on_iteration: Callable[[TraceRow], None] | None = None,
) -> list[TraceRow]:
    """Train in place on ``(images, gt_boxes)`` samples; returns the per-iteration loss trace.

    Minibatches hold ``cfg.samples_per_batch`` samples; the sample order is
    reshuffled each epoch from ``seed``. A checkpoint is written at each epoch
    end when ``checkpoint_dir`` is given.
    """
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    if not samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng(seed)
    opt = SGD(model.params, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    bs = cfg.samples_per_batch
    trace: list[TraceRow] = []
    it = 0
    for epoch in range(1, epochs + 1):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(samples))
        for start in range(0, len(order), bs):
            batch = [samples[i] for i in order[start:start + bs]]
            it += 1
            with Tape() as tape:
                losses = forward_train(model, batch, rng)
            vals = losses.values()
            if not all(math.isfinite(v) for v in vals.values()):
                raise TrainingDiverged(f"non-finite loss at iteration {it} (epoch {epoch}, lr {lr}): {vals}")
            model.zero_grad()
            tape.backward(losses.total)
            opt.step(lr)
            row = TraceRow(it, epoch, lr, **vals)
            trace.append(row)
            if on_iteration:
                on_iteration(row)
        logger.info("epoch %d done: lr=%g last total=%.4f", epoch, lr, trace[-1].total)
        if checkpoint_dir:
            save_checkpoint(model, os.path.join(checkpoint_dir, f"epoch{epoch}.ckpt"), epoch)
    return trace


def write_trace(path: str | os.PathLike, trace: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        w.writeheader()
        for row in trace:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(row).items()})


def read_trace(path: str | os.PathLike) -> list[TraceRow]:
    with open(path, newline="") as fh:
        return [
            TraceRow(int(r["iter"]), int(r["epoch"]), *(float(r[k]) for k in TRACE_FIELDS[2:]))
            for r in csv.DictReader(fh)
        ]
