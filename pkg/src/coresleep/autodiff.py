"""Differentiable primitives, Adam and a finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects in double precision; torch's
autograd graph plays the role of the tape. The functions here are the only
numerical primitives the model code relies on, and each one refuses to
silently propagate NaN/Inf.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import ConfigError, DataError, NonDeterministicError, NonFiniteError, ShapeError

DTYPE = torch.float64


def tensor(values, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(values, dtype=DTYPE).clone()
    _check_finite(t, "tensor")
    return t.requires_grad_(requires_grad)


def _check_finite(t: torch.Tensor, op: str) -> torch.Tensor:
    # any NaN/Inf element makes the sum non-finite; count only on failure
    if not math.isfinite(float(t.detach().sum())):
        bad = int((~torch.isfinite(t)).sum())
        raise NonFiniteError(f"{op}: {bad} non-finite value(s) in output of shape {tuple(t.shape)}")
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError as exc:
        raise ShapeError(
            f"matmul: batch extents of {tuple(a.shape)} and {tuple(b.shape)} do not broadcast"
        ) from exc
    return _check_finite(torch.matmul(a, b), "matmul")


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f"softmax: axis {axis} invalid for shape {tuple(x.shape)}")
    # torch's kernel subtracts the running max before exponentiating
    return _check_finite(torch.softmax(x, dim=axis), "softmax")


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True))


def layernorm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalize over the last axis with biased variance, then scale and shift."""
    if x.dim() == 0 or x.shape[-1] < 1:
        raise ShapeError(f"layernorm: last axis must be non-empty, got shape {tuple(x.shape)}")
    if eps <= 0:
        raise ConfigError("layernorm: eps must be positive")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered / torch.sqrt(var + eps) * gamma + beta
    return _check_finite(out, "layernorm")


def relu(x: torch.Tensor) -> torch.Tensor:
    # torch's subgradient at exactly 0 is 0
    return torch.relu(x)


def dropout(
    x: torch.Tensor, p: float, training: bool, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    scale = torch.empty_like(x, requires_grad=False).bernoulli_(1.0 - p, generator=generator)
    return x * scale.mul_(1.0 / (1.0 - p))


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over rows.

    ``targets`` is either an integer vector of labels or a float matrix of the
    same shape as ``logits`` holding target distributions (e.g. identity rows).
    """
    if logits.dim() != 2 or logits.shape[1] < 1:
        raise ShapeError(f"cross_entropy: logits must be [n, C>=1], got {tuple(logits.shape)}")
    logp = log_softmax(logits, axis=1)
    if targets.dtype.is_floating_point:
        if targets.shape != logits.shape:
            raise ShapeError(
                f"cross_entropy: target matrix {tuple(targets.shape)} != logits {tuple(logits.shape)}"
            )
        loss = -(targets * logp).sum(dim=1).mean()
    else:
        n, c = logits.shape
        if targets.shape != (n,):
            raise ShapeError(f"cross_entropy: expected {n} labels, got shape {tuple(targets.shape)}")
        if n and (int(targets.min()) < 0 or int(targets.max()) >= c):
            raise DataError(f"cross_entropy: labels must lie in [0, {c})")
        loss = -logp.gather(1, targets.long().unsqueeze(1)).mean()
    return _check_finite(loss, "cross_entropy")


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    loss.backward()


@dataclass
class AdamState:
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float = 1e-4,
    weight_decay: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update with L2 weight decay folded into the gradient.

    Parameters whose ``grad`` is ``None`` did not take part in the loss and are
    left untouched, including their moments.
    """
    beta1, beta2 = betas
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    with torch.no_grad():
        for name, p in params.items():
            if p.grad is None:
                continue
            if p.grad.shape != p.shape:
                raise ShapeError(f"adam: grad of {name} has shape {tuple(p.grad.shape)}, param {tuple(p.shape)}")
            g = p.grad
            if weight_decay:
                g = g + weight_decay * p
            m = state.exp_avg.get(name)
            v = state.exp_avg_sq.get(name)
            if m is None:
                m = state.exp_avg[name] = torch.zeros_like(p)
                v = state.exp_avg_sq[name] = torch.zeros_like(p)
            elif m.shape != p.shape:
                raise ShapeError(f"adam: moment of {name} has shape {tuple(m.shape)}, param {tuple(p.shape)}")
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))
    return state


def finite_diff_check(
    f: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    eps: float = 1e-5,
    n_coords: int = 50,
    seed: int = 0,
) -> float:
    """Compare autograd gradients of scalar ``f()`` against central differences.

    Coordinates are sampled uniformly across all parameters. Returns the max of
    ``|g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)`` over the sample.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    base = float(loss.detach())
    if float(f().detach()) != base:
        raise NonDeterministicError("finite_diff_check: f is not deterministic; disable dropout and fix rngs")
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    total = int(sizes.sum())
    flat = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for k in flat:
            i = int(np.searchsorted(offsets, k, side="right") - 1)
            j = int(k - offsets[i])
            view = params[i].view(-1)
            orig = float(view[j])
            view[j] = orig + eps
            up = float(f())
            view[j] = orig - eps
            down = float(f())
            view[j] = orig
            g_fd = (up - down) / (2 * eps)
            g_ad = float(grads[i].view(-1)[j])
            worst = max(worst, abs(g_ad - g_fd) / (abs(g_ad) + abs(g_fd) + 1e-12))
    return worst
