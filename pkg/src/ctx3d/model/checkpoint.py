"""Model checkpoints on top of the CTX3D tensor file format.

Besides the parameters, a checkpoint carries three rank-0 entries:
``meta/config/<fingerprint>``, ``meta/epoch`` and a closing ``meta/end``.
"""

from __future__ import annotations

import os
from collections import OrderedDict

import numpy as np

from ..nn import Tensor
from ..nn.serialize import CheckpointError, read_tensors, write_tensors
from .config import ModelConfig
from .network import Model, build_model

_FP = "meta/config/"


def save_checkpoint(model: Model, path: str | os.PathLike, epoch: int = 0) -> None:
    entries = OrderedDict()
    entries[_FP + model.cfg.fingerprint()] = np.zeros((), np.float32)
    entries["meta/epoch"] = np.asarray(epoch, np.float32)
    for name, p in model.params.items():
        entries[name] = p.data
    entries["meta/end"] = np.zeros((), np.float32)
    write_tensors(path, entries)


def load_checkpoint(path: str | os.PathLike, cfg: ModelConfig) -> tuple[Model, int]:
    """Rebuild a model for ``cfg`` from ``path``; returns ``(model, epoch)``."""
    entries = read_tensors(path)
    if "meta/end" not in entries:
        raise CheckpointError(f"{path}: truncated checkpoint (no end marker)")
    stored = [k[len(_FP):] for k in entries if k.startswith(_FP)]
    if stored != [cfg.fingerprint()]:
        raise CheckpointError(
            f"{path}: config fingerprint mismatch (checkpoint {stored}, config {cfg.fingerprint()})")
    template = build_model(cfg, seed=0)
    params = OrderedDict()
    for name, p in template.params.items():
        if name not in entries:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        arr = entries[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {p.shape}")
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    return Model(cfg, params), int(entries["meta/epoch"])
