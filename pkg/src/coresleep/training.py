"""Optimization loop: warmup+cosine schedule, validation, early stopping, checkpoints."""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .config import RunConfig, TrainConfig
from .datapipe.batching import assemble_batches, group_batch
from .datapipe.records import SpectralSequence
from .errors import CheckpointError, ConfigError, NonFiniteError
from .fusion import UnimodalWrapper, build_model
from .objectives import GroupOutput, LossBreakdown, total_loss


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to 0 at ``max_steps``."""
    if step < 0:
        raise ConfigError("step must be non-negative")
    peak, warm, total = cfg.peak_lr, cfg.scaled_warmup, cfg.max_steps
    if step < warm:
        return peak * step / warm
    if step >= total:
        return 0.0
    progress = (step - warm) / max(1, total - warm)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    step: int
    params: dict[str, torch.Tensor]  # live parameters of the model being trained
    adam: ad.AdamState
    best_metric: float = -math.inf
    best_step: int = 0
    best_params: dict[str, torch.Tensor] = field(default_factory=dict)
    rng_state: torch.Tensor | None = None
    loss_history: list[float] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)


def init_state(model: nn.Module) -> TrainState:
    return TrainState(0, dict(model.named_parameters()), ad.AdamState())


def early_stop(state: TrainState, patience: int) -> bool:
    return state.step - state.best_step >= patience


def forward_groups(model: nn.Module, groups) -> list[GroupOutput]:
    out = []
    for g in groups:
        if isinstance(model, UnimodalWrapper):
            if model.modality not in g.present:
                continue
            res = model(**{model.modality: g.inputs[model.modality]})
        else:
            res = model(**g.inputs)
        out.append(GroupOutput(res, g.labels))
    return out


def batch_loss(model, batch, sequences, cfg: RunConfig) -> LossBreakdown | None:
    groups = group_batch(batch, sequences, dtype=cfg.model.torch_dtype)
    outs = forward_groups(model, groups)
    return total_loss(outs, cfg.loss) if outs else None


def validation_accuracy(model, sequences) -> float:
    from .evaluation import predict
    from .metrics import accuracy, confusion_matrix

    preds = predict(model, sequences, available=("eeg", "eog"))
    true = np.concatenate([s.labels for s in sequences])
    return accuracy(confusion_matrix(true, np.concatenate(preds)))


def train(
    model: nn.Module,
    train_seqs: Sequence[SpectralSequence],
    val_seqs: Sequence[SpectralSequence],
    cfg: RunConfig,
    state: TrainState | None = None,
    max_new_steps: int | None = None,
    on_step: Callable[[TrainState, LossBreakdown], None] | None = None,
) -> TrainState:
    """Run (or continue) training until ``max_steps``, early stopping or ``max_new_steps``.

    The batch for update ``k`` depends only on ``k`` and the seed, so resuming
    from a checkpoint replays exactly the uninterrupted trajectory.
    """
    tc = cfg.training
    if not train_seqs:
        raise ConfigError("no training sequences")
    state = state or init_state(model)
    gen = getattr(model, "dropout_generator", None)
    n_batches = len(assemble_batches(train_seqs, tc.batch_size, tc.span, seed=tc.seed, epoch=0))
    stop_at = tc.max_steps if max_new_steps is None else min(tc.max_steps, state.step + max_new_steps)
    cache: dict[int, list] = {}
    while state.step < stop_at:
        epoch, idx = divmod(state.step, n_batches)
        if epoch not in cache:
            cache.clear()
            cache[epoch] = assemble_batches(train_seqs, tc.batch_size, tc.span, seed=tc.seed, epoch=epoch)
        batch = cache[epoch][idx]
        model.train()
        for p in state.params.values():
            p.grad = None
        try:
            loss = batch_loss(model, batch, train_seqs, cfg)
            if loss is not None:
                if not torch.isfinite(loss.total):
                    raise NonFiniteError(f"loss is {float(loss.total.detach())}")
                ad.backward(loss.total)
        except NonFiniteError as exc:
            spans = [(train_seqs[s.seq].patient_id, s.start, s.stop) for s in batch.spans]
            raise NonFiniteError(
                f"non-finite value at step {state.step} (epoch {epoch}, batch {batch.batch_id}): {exc}; spans={spans}"
            ) from exc
        ad.adam_step(state.params, state.adam, lr=lr_schedule(state.step + 1, tc), weight_decay=tc.weight_decay)
        state.step += 1
        state.loss_history.append(float(loss.total.detach()) if loss is not None else float("nan"))
        if on_step is not None:
            on_step(state, loss)
        if val_seqs and state.step % tc.scaled_validate_every == 0:
            acc = validation_accuracy(model, val_seqs)
            state.val_history.append((state.step, acc))
            if acc > state.best_metric:
                state.best_metric, state.best_step = acc, state.step
                state.best_params = {k: v.detach().clone() for k, v in state.params.items()}
            if early_stop(state, tc.scaled_patience):
                break
    if gen is not None:
        state.rng_state = gen.get_state()
    return state


def restore_best(model: nn.Module, state: TrainState) -> None:
    if not state.best_params:
        return
    with torch.no_grad():
        for k, p in model.named_parameters():
            p.copy_(state.best_params[k])


# ------------------------------------------------------------------ checkpoint

_MAGIC = b"CRSC"
_VERSION = 1
_PREFIX = struct.Struct("<4sH64sI")


def _tensor_table(state: TrainState, rng: torch.Tensor | None) -> dict[str, torch.Tensor]:
    t = {f"param/{k}": v.detach() for k, v in state.params.items()}
    t.update({f"adam_m/{k}": v for k, v in state.adam.exp_avg.items()})
    t.update({f"adam_v/{k}": v for k, v in state.adam.exp_avg_sq.items()})
    t.update({f"best/{k}": v for k, v in state.best_params.items()})
    if rng is not None:
        t["rng"] = rng
    return t


def save_checkpoint(state: TrainState, model: nn.Module, cfg: RunConfig, path: str | Path) -> Path:
    """Atomic write of the full training state, keyed by the config digest."""
    path = Path(path)
    gen = getattr(model, "dropout_generator", None)
    rng = gen.get_state() if gen is not None else state.rng_state
    tensors = _tensor_table(state, rng)
    index, blobs, offset = [], [], 0
    for name, t in tensors.items():
        raw = t.contiguous().cpu().numpy().tobytes()
        index.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).removeprefix("torch."), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "step": state.step,
            "adam_step": state.adam.step,
            "best_metric": state.best_metric if math.isfinite(state.best_metric) else None,
            "best_step": state.best_step,
            "loss_history": state.loss_history,
            "val_history": state.val_history,
            "tensors": index,
        }
    ).encode()
    body = _PREFIX.pack(_MAGIC, _VERSION, cfg.digest().encode(), len(header)) + header + b"".join(blobs)
    payload = body + hashlib.sha256(body).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _read_checkpoint(path: Path, cfg: RunConfig) -> tuple[dict, dict[str, torch.Tensor]]:
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _PREFIX.size + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, digest = blob[:-32], blob[-32:]
    magic, version, cfg_digest, hlen = _PREFIX.unpack_from(body)
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != _VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    if cfg_digest.decode() != cfg.digest():
        raise CheckpointError(f"{path}: checkpoint was written for a different config")
    header = json.loads(body[_PREFIX.size : _PREFIX.size + hlen])
    data = memoryview(body)[_PREFIX.size + hlen :]
    tensors = {}
    for e in header["tensors"]:
        dtype = getattr(torch, e["dtype"])
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype=torch.empty((), dtype=dtype).numpy().dtype, count=n, offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.copy()).reshape(e["shape"])
    return header, tensors


def load_checkpoint(path: str | Path, cfg: RunConfig) -> tuple[nn.Module, TrainState]:
    """Rebuild the model for ``cfg`` and restore parameters, optimizer, rng and counters."""
    header, tensors = _read_checkpoint(Path(path), cfg)
    model = build_model(cfg.model, seed=cfg.training.seed)
    params = dict(model.named_parameters())
    if set(params) != {k.removeprefix("param/") for k in tensors if k.startswith("param/")}:
        raise CheckpointError(f"{path}: parameter names do not match the configured model")
    with torch.no_grad():
        for k, p in params.items():
            p.copy_(tensors[f"param/{k}"])
    adam = ad.AdamState(
        {k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")},
        {k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")},
        header["adam_step"],
    )
    rng = tensors.get("rng")
    if rng is not None:
        model.dropout_generator.set_state(rng)
    best = header["best_metric"]
    state = TrainState(
        header["step"],
        params,
        adam,
        -math.inf if best is None else best,
        header["best_step"],
        {k[5:]: v for k, v in tensors.items() if k.startswith("best/")},
        rng,
        list(header["loss_history"]),
        [tuple(v) for v in header["val_history"]],
    )
    return model, state
