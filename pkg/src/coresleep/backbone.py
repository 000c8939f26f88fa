"""Unimodal transformer encoder with an inner (frames) and outer (windows) stage.

Inputs are batched as ``[B, L, T, D]``: B sequences of L consecutive windows,
each window T spectral frames of D bins. A learnable [CLS] token is prepended
to every window; its final inner state is the window summary fed to the outer
stage.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from . import autodiff as ad
from .config import ModelConfig
from .errors import ShapeError


def _param(*shape: int, std: float) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, dtype=ad.DTYPE) * std)


def _zeros(*shape: int) -> nn.Parameter:
    return nn.Parameter(torch.zeros(*shape, dtype=ad.DTYPE))


class Dropout(nn.Module):
    """Inverted dropout drawing from an explicit generator (see ``attach_generator``)."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.generator: torch.Generator | None = None

    def forward(self, x):
        return ad.dropout(x, self.p, self.training, self.generator)


def attach_generator(model: nn.Module, generator: torch.Generator) -> None:
    for m in model.modules():
        if isinstance(m, Dropout):
            m.generator = generator


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(dim, dtype=ad.DTYPE))
        self.beta = _zeros(dim)
        self.eps = eps

    def forward(self, x):
        return ad.layernorm(x, self.gamma, self.beta, self.eps)


class RelativePositionTable(nn.Module):
    """Learnable key offsets indexed by ``j - i`` in ``[-max_offset, max_offset]``."""

    def __init__(self, max_offset: int, d_k: int):
        super().__init__()
        self.max_offset = max_offset
        self.weight = _param(2 * max_offset + 1, d_k, std=0.02)

    def lookup(self, n_query: int, n_key: int) -> torch.Tensor:
        """Embeddings ``[n_query, n_key, d_k]`` for every (query i, key j) pair."""
        if max(n_query, n_key) > self.max_offset + 1:
            raise ShapeError(
                f"sequence length {max(n_query, n_key)} exceeds relative table range ±{self.max_offset}"
            )
        offsets = torch.arange(n_key)[None, :] - torch.arange(n_query)[:, None]
        offsets = offsets.clamp(-self.max_offset, self.max_offset) + self.max_offset
        return self.weight[offsets]


class MultiHeadAttention(nn.Module):
    """Multi-head attention; self-attention when ``context`` is omitted.

    Queries come from ``x``, keys and values from ``context`` (or ``x``). With a
    relative table, the embedding for offset ``j - i`` is added to key ``j``
    when attending from query ``i``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h, d = cfg.n_heads, cfg.d_model
        self.n_heads, self.d_k = h, cfg.d_k
        self.w_q = _param(h, d, cfg.d_k, std=d**-0.5)
        self.w_k = _param(h, d, cfg.d_k, std=d**-0.5)
        self.w_v = _param(h, d, cfg.d_u, std=d**-0.5)
        self.w_o = _param(h * cfg.d_u, d, std=(h * cfg.d_u) ** -0.5)
        self.drop = Dropout(cfg.dropout)

    def attention_logits(self, x, context=None, rel: RelativePositionTable | None = None):
        kv = x if context is None else context
        if kv.shape[-2] == 0:
            raise ShapeError("attention over an empty key sequence")
        q = ad.matmul(x.unsqueeze(-3), self.w_q) / math.sqrt(self.d_k)  # [..., H, Sq, d_k]
        k = ad.matmul(kv.unsqueeze(-3), self.w_k)
        logits = ad.matmul(q, k.transpose(-1, -2))
        if rel is not None:
            table = rel.lookup(x.shape[-2], kv.shape[-2])  # [Sq, Sk, d_k]
            logits = logits + torch.einsum("...hik,ijk->...hij", q, table)
        return logits

    def forward(self, x, context=None, rel: RelativePositionTable | None = None, return_probs: bool = False):
        kv = x if context is None else context
        probs = ad.softmax(self.attention_logits(x, context, rel), axis=-1)
        v = ad.matmul(kv.unsqueeze(-3), self.w_v)
        heads = ad.matmul(self.drop(probs), v)  # [..., H, Sq, d_u]
        heads = heads.transpose(-3, -2).flatten(-2)
        out = ad.matmul(heads, self.w_o)
        return (out, probs) if return_probs else out


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.w1 = _param(cfg.d_model, cfg.d_ff, std=cfg.d_model**-0.5)
        self.b1 = _zeros(cfg.d_ff)
        self.w2 = _param(cfg.d_ff, cfg.d_model, std=cfg.d_ff**-0.5)
        self.b2 = _zeros(cfg.d_model)
        self.drop = Dropout(cfg.dropout)

    def forward(self, x):
        hidden = self.drop(ad.relu(ad.matmul(x, self.w1) + self.b1))
        return ad.matmul(hidden, self.w2) + self.b2


class EncoderLayer(nn.Module):
    """Post-norm layer: SA -> add&norm [-> CA -> add&norm] -> FF -> add&norm.

    Passing ``shared`` builds a cross-attending layer whose SA and FF sublayers
    (with their norms) are the very same modules as ``shared``'s.
    """

    def __init__(self, cfg: ModelConfig, shared: "EncoderLayer | None" = None):
        super().__init__()
        if shared is None:
            self.attn = MultiHeadAttention(cfg)
            self.norm1 = LayerNorm(cfg.d_model, cfg.ln_eps)
            self.ff = FeedForward(cfg)
            self.norm2 = LayerNorm(cfg.d_model, cfg.ln_eps)
            self.cross = self.norm_cross = None
        else:
            self.attn, self.norm1 = shared.attn, shared.norm1
            self.ff, self.norm2 = shared.ff, shared.norm2
            self.cross = MultiHeadAttention(cfg)
            self.norm_cross = LayerNorm(cfg.d_model, cfg.ln_eps)

    def forward(self, x, rel=None, context=None):
        z = self.norm1(x + self.attn(x, rel=rel))
        if self.cross is not None:
            if context is None:
                raise ShapeError("cross-attending layer called without a context sequence")
            z = self.norm_cross(z + self.cross(z, context=context))
        return self.norm2(z + self.ff(z))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, n_layers: int, max_len: int):
        super().__init__()
        self.max_len = max_len
        self.rel = RelativePositionTable(max_len, cfg.d_k)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(n_layers))

    def forward(self, x, context=None, layers=None):
        if x.shape[-2] > self.max_len:
            raise ShapeError(f"sequence of length {x.shape[-2]} exceeds block maximum {self.max_len}")
        for layer in self.layers if layers is None else layers:
            x = layer(x, rel=self.rel, context=context)
        return x


class PredictorHead(nn.Module):
    """Two-layer MLP mapping a window representation to class logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.w1 = _param(cfg.d_model, cfg.d_ff, std=cfg.d_model**-0.5)
        self.b1 = _zeros(cfg.d_ff)
        self.w2 = _param(cfg.d_ff, cfg.n_classes, std=cfg.d_ff**-0.5)
        self.b2 = _zeros(cfg.n_classes)
        self.drop = Dropout(cfg.dropout)

    def forward(self, x):
        return ad.matmul(self.drop(ad.relu(ad.matmul(x, self.w1) + self.b1)), self.w2) + self.b2


def _as_batched(windows: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    if windows.dim() == 3:
        windows = windows.unsqueeze(0)
    if windows.dim() != 4 or windows.shape[-2:] != (cfg.n_frames, cfg.n_features):
        raise ShapeError(
            f"expected windows [B, L, {cfg.n_frames}, {cfg.n_features}], got {tuple(windows.shape)}"
        )
    if not 1 <= windows.shape[1] <= cfg.max_windows:
        raise ShapeError(f"outer sequence length {windows.shape[1]} outside [1, {cfg.max_windows}]")
    return windows.to(cfg.torch_dtype)


class UnimodalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.w_in = _param(cfg.n_features, cfg.d_model, std=cfg.n_features**-0.5)
        self.b_in = _zeros(cfg.d_model)
        self.cls = _param(cfg.d_model, std=1.0)
        self.inner = EncoderBlock(cfg, cfg.inner_layers, cfg.n_frames + 1)
        self.outer = EncoderBlock(cfg, cfg.outer_layers, cfg.max_windows)

    def embed(self, frames: torch.Tensor) -> torch.Tensor:
        """``[N, T, D]`` frames -> ``[N, T+1, d_model]`` tokens with [CLS] at position 0."""
        if frames.shape[-2:] != (self.cfg.n_frames, self.cfg.n_features):
            raise ShapeError(
                f"expected frames [.., {self.cfg.n_frames}, {self.cfg.n_features}], got {tuple(frames.shape)}"
            )
        tokens = ad.matmul(frames, self.w_in) + self.b_in
        cls = self.cls.expand(*tokens.shape[:-2], 1, self.cfg.d_model)
        return torch.cat([cls, tokens], dim=-2)

    def inner_encode(self, window: torch.Tensor):
        """One window ``[T, D]`` (or a stack ``[N, T, D]``) -> (summary, token states)."""
        states = self.inner(self.embed(window))
        return states[..., 0, :], states

    def outer_encode(self, summaries: torch.Tensor) -> torch.Tensor:
        return self.outer(summaries)

    def forward(self, windows: torch.Tensor):
        """``[B, L, T, D]`` -> inner token states ``[B, L, T+1, d]`` and outer states ``[B, L, d]``."""
        windows = _as_batched(windows, self.cfg)
        b, l = windows.shape[:2]
        summary, states = self.inner_encode(windows.reshape(b * l, *windows.shape[2:]))
        outer = self.outer_encode(summary.reshape(b, l, -1))
        return states.reshape(b, l, *states.shape[1:]), outer


class UnimodalModel(nn.Module):
    """Single-modality encoder plus predictor: the unimodal-equivalent baseline."""

    def __init__(self, cfg: ModelConfig, encoder: UnimodalEncoder | None = None, head: PredictorHead | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = encoder if encoder is not None else UnimodalEncoder(cfg)
        self.head = head if head is not None else PredictorHead(cfg)

    def forward(self, windows: torch.Tensor) -> dict:
        inner, outer = self.encoder(windows)
        return {"logits": self.head(outer), "inner_states": inner, "outer_states": outer}


def unimodal_forward(model: UnimodalModel, windows: torch.Tensor):
    out = model(windows)
    return out["logits"], out["inner_states"], out["outer_states"]
