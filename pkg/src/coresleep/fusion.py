"""Two-modality fusion architectures: CoRe, Mid-Late and Early.

Every model's ``forward(eeg=None, eog=None)`` takes ``[B, L, T, D]`` windows for
whichever modalities are available and returns a dict with a subset of
``logits_mm``, ``logits_eeg``, ``logits_eog``, ``outer_eeg``, ``outer_eog``,
``cls_eeg`` and ``cls_eog``. A missing modality is passed as ``None``; no
placeholder input is ever fed through the network.
"""
from __future__ import annotations

import torch
from torch import nn

from . import autodiff as ad
from .backbone import (
    EncoderBlock,
    EncoderLayer,
    MultiHeadAttention,
    PredictorHead,
    UnimodalEncoder,
    UnimodalModel,
    _as_batched,
    _param,
    attach_generator,
)
from .config import MODALITIES, Fusion, ModelConfig
from .errors import ConfigError, ShapeError


def cross_attention(x_self: torch.Tensor, x_other: torch.Tensor, weights: MultiHeadAttention) -> torch.Tensor:
    """Ground ``x_self`` on ``x_other``: queries from the former, keys/values from the latter."""
    if x_other.shape[-2] == 0:
        raise ShapeError("cross-attention needs a non-empty context sequence")
    return weights(x_self, context=x_other)


def _other(modality: str) -> str:
    return "eog" if modality == "eeg" else "eeg"


def _check_inputs(cfg: ModelConfig, eeg, eog) -> dict[str, torch.Tensor]:
    data = {m: _as_batched(x, cfg) for m, x in (("eeg", eeg), ("eog", eog)) if x is not None}
    if not data:
        raise ShapeError("at least one modality must be provided")
    if len(data) == 2 and data["eeg"].shape[:2] != data["eog"].shape[:2]:
        raise ShapeError(
            f"modalities are not aligned: eeg {tuple(data['eeg'].shape[:2])} vs eog {tuple(data['eog'].shape[:2])}"
        )
    return data


class _Heads(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.share_predictors:
            shared = PredictorHead(cfg)
            self.eeg = self.eog = self.mm = shared
        else:
            self.eeg, self.eog, self.mm = PredictorHead(cfg), PredictorHead(cfg), PredictorHead(cfg)


class GroundedEncoder(nn.Module):
    """Multimodal branch of one modality.

    Re-runs that modality's tokens through layers whose SA/FF are the unimodal
    encoder's own modules, with a cross-attention sublayer in between that
    looks at the other modality's unimodal states.
    """

    def __init__(self, base: UnimodalEncoder, cfg: ModelConfig):
        super().__init__()
        self.base = base
        self.inner_layers = nn.ModuleList(EncoderLayer(cfg, shared=l) for l in base.inner.layers)
        self.outer_layers = nn.ModuleList(EncoderLayer(cfg, shared=l) for l in base.outer.layers)

    def forward(self, windows, other_inner, other_outer):
        b, l = windows.shape[:2]
        tokens = self.base.embed(windows.reshape(b * l, *windows.shape[2:]))
        context = other_inner.reshape(b * l, *other_inner.shape[2:])
        states = self.base.inner(tokens, context=context, layers=self.inner_layers)
        summary = states[:, 0, :].reshape(b, l, -1)
        return self.base.outer(summary, context=other_outer, layers=self.outer_layers)


class CoReModel(nn.Module):
    """Coordinated representations: unimodal encoders plus cross-attending grounded branches."""

    fusion = Fusion.CORE

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.unimodal = nn.ModuleDict({m: UnimodalEncoder(cfg) for m in MODALITIES})
        self.grounded = nn.ModuleDict({m: GroundedEncoder(self.unimodal[m], cfg) for m in MODALITIES})
        self.heads = _Heads(cfg)

    def unimodal_model(self, modality: str) -> UnimodalModel:
        """Standalone unimodal network built on this model's own parameters."""
        return UnimodalModel(self.cfg, self.unimodal[modality], getattr(self.heads, modality))

    def forward(self, eeg=None, eog=None) -> dict:
        data = _check_inputs(self.cfg, eeg, eog)
        out, inner, outer = {}, {}, {}
        for m, x in data.items():
            inner[m], outer[m] = self.unimodal[m](x)
            out[f"outer_{m}"] = outer[m]
            out[f"cls_{m}"] = inner[m][:, :, 0, :]
            out[f"logits_{m}"] = getattr(self.heads, m)(outer[m])
        if len(data) == 2:
            rep = sum(
                self.grounded[m](data[m], inner[_other(m)], outer[_other(m)]) for m in MODALITIES
            )
            out["logits_mm"] = self.heads.mm(rep)
        return out


class MidLateModel(nn.Module):
    """Independent unimodal encoders whose outer states are summed for the joint head."""

    fusion = Fusion.MIDLATE

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.unimodal = nn.ModuleDict({m: UnimodalEncoder(cfg) for m in MODALITIES})
        self.heads = _Heads(cfg)

    def unimodal_model(self, modality: str) -> UnimodalModel:
        return UnimodalModel(self.cfg, self.unimodal[modality], getattr(self.heads, modality))

    def forward(self, eeg=None, eog=None) -> dict:
        data = _check_inputs(self.cfg, eeg, eog)
        out = {}
        for m, x in data.items():
            inner, outer = self.unimodal[m](x)
            out[f"outer_{m}"] = outer
            out[f"cls_{m}"] = inner[:, :, 0, :]
            out[f"logits_{m}"] = getattr(self.heads, m)(outer)
        if len(data) == 2:
            out["logits_mm"] = self.heads.mm(out["outer_eeg"] + out["outer_eog"])
        return out


class EarlyModel(nn.Module):
    """One shared encoder over both modalities' frames, told apart by modality embeddings.

    The joint inner sequence per window is ``[CLS, eeg frames, eog frames]``
    (length 2T+1); its [CLS] summaries form a length-L outer sequence. Unimodal
    logits come from extra passes that feed a single modality.
    """

    fusion = Fusion.EARLY

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.w_in = _param(cfg.n_features, d, std=cfg.n_features**-0.5)
        self.b_in = nn.Parameter(torch.zeros(d, dtype=self.w_in.dtype))
        self.cls = _param(d, std=1.0)
        self.modality_emb = nn.ParameterDict({m: _param(d, std=1.0) for m in MODALITIES})
        self.inner = EncoderBlock(cfg, cfg.inner_layers, 2 * cfg.n_frames + 1)
        self.outer = EncoderBlock(cfg, cfg.outer_layers, cfg.max_windows)
        self.heads = _Heads(cfg)

    def _tokens(self, x: torch.Tensor, modality: str) -> torch.Tensor:
        b, l = x.shape[:2]
        frames = x.reshape(b * l, *x.shape[2:])
        return ad.matmul(frames, self.w_in) + self.b_in + self.modality_emb[modality]

    def _encode(self, token_groups: list[torch.Tensor], b: int, l: int):
        cls = self.cls.expand(b * l, 1, self.cfg.d_model)
        states = self.inner(torch.cat([cls, *token_groups], dim=1))
        summary = states[:, 0, :].reshape(b, l, -1)
        return summary, self.outer(summary)

    def forward(self, eeg=None, eog=None, unimodal: bool = True) -> dict:
        data = _check_inputs(self.cfg, eeg, eog)
        b, l = next(iter(data.values())).shape[:2]
        tokens = {m: self._tokens(x, m) for m, x in data.items()}
        out = {}
        if len(data) == 2:
            _, joint = self._encode([tokens["eeg"], tokens["eog"]], b, l)
            out["logits_mm"] = self.heads.mm(joint)
        if unimodal or len(data) == 1:
            for m in data:
                summary, outer = self._encode([tokens[m]], b, l)
                out[f"outer_{m}"] = outer
                out[f"cls_{m}"] = summary
                out[f"logits_{m}"] = getattr(self.heads, m)(outer)
        return out


class UnimodalWrapper(nn.Module):
    """Unimodal-equivalent network exposed through the two-modality interface."""

    fusion = Fusion.UNIMODAL

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.modality = cfg.modality
        self.net = UnimodalModel(cfg)

    def forward(self, eeg=None, eog=None) -> dict:
        x = {"eeg": eeg, "eog": eog}[self.modality]
        if x is None:
            raise ShapeError(f"unimodal {self.modality} model called without {self.modality} input")
        out = self.net(_as_batched(x, self.cfg))
        m = self.modality
        return {
            f"logits_{m}": out["logits"],
            "logits_mm": out["logits"],
            f"outer_{m}": out["outer_states"],
            f"cls_{m}": out["inner_states"][:, :, 0, :],
        }


core_forward = CoReModel.forward
midlate_forward = MidLateModel.forward
early_forward = EarlyModel.forward

_BUILDERS = {
    Fusion.CORE: CoReModel,
    Fusion.MIDLATE: MidLateModel,
    Fusion.EARLY: EarlyModel,
    Fusion.UNIMODAL: UnimodalWrapper,
}


def build_model(cfg: ModelConfig, seed: int = 0) -> nn.Module:
    """Instantiate the configured variant with seed-determined initial weights."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = _BUILDERS[cfg.fusion](cfg).to(cfg.torch_dtype)
    gen = torch.Generator().manual_seed(seed + 1)
    attach_generator(model, gen)
    model.dropout_generator = gen
    return model


def infer_with_missing(model: nn.Module, available, eeg=None, eog=None) -> torch.Tensor:
    """Logits ``[B, L, C]`` using only the modalities in ``available``.

    Both present -> the joint head; one present -> that modality's unimodal head.
    """
    available = set(available)
    if not available:
        raise ConfigError("infer_with_missing needs at least one available modality")
    unknown = available - set(MODALITIES)
    if unknown:
        raise ConfigError(f"unknown modalities {sorted(unknown)}")
    inputs = {m: x for m, x in (("eeg", eeg), ("eog", eog)) if m in available}
    if any(x is None for x in inputs.values()):
        raise ShapeError("a modality marked available has no data")
    if isinstance(model, UnimodalWrapper):
        if model.modality not in available:
            raise ConfigError(f"unimodal {model.modality} model cannot run on {sorted(available)}")
        return model(**{model.modality: inputs[model.modality]})[f"logits_{model.modality}"]
    if isinstance(model, EarlyModel):
        out = model(**inputs, unimodal=False)
    else:
        out = model(**inputs)
    if len(inputs) == 2:
        return out["logits_mm"]
    (m,) = inputs
    return out[f"logits_{m}"]
