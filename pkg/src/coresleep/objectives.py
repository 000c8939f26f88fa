"""Multi-task objective: joint cross-entropy, per-modality supervision, alignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import autodiff as ad
from .config import MODALITIES, LossConfig
from .errors import ConfigError, ShapeError


@dataclass
class LossBreakdown:
    total: torch.Tensor
    ce_multimodal: torch.Tensor
    ce_per_modality: dict[str, torch.Tensor] = field(default_factory=dict)
    al_value: torch.Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        d = {"total": float(self.total.detach()), "ce_mm": float(self.ce_multimodal.detach())}
        d.update({f"ce_{m}": float(v.detach()) for m, v in self.ce_per_modality.items()})
        if self.al_value is not None:
            d["al"] = float(self.al_value.detach())
        return d


def _flat_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return ad.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1))


def multi_supervised_loss(unimodal_logits: dict[str, torch.Tensor], labels: torch.Tensor, modalities=MODALITIES) -> torch.Tensor:
    """Sum over modalities of the mean cross-entropy of each unimodal predictor."""
    missing = [m for m in modalities if m not in unimodal_logits]
    if missing:
        raise ConfigError(f"multi-supervised loss needs logits for {missing}")
    return sum(_flat_ce(unimodal_logits[m], labels) for m in modalities)


def alignment_loss(
    rep_a: torch.Tensor, rep_b: torch.Tensor, lambda_a: float = 0.1, normalize: bool = True
) -> torch.Tensor:
    """Contrastive window matching between two modalities.

    ``rep_a``/``rep_b`` are ``[L, d]`` (or ``[B, L, d]``, averaged over B). The
    similarity matrix is scored against the identity in both directions.
    """
    if rep_a.shape != rep_b.shape:
        raise ShapeError(f"alignment loss: shapes differ {tuple(rep_a.shape)} vs {tuple(rep_b.shape)}")
    if rep_a.dim() == 2:
        rep_a, rep_b = rep_a.unsqueeze(0), rep_b.unsqueeze(0)
    if normalize:
        rep_a = rep_a / rep_a.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        rep_b = rep_b / rep_b.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    b, l, _ = rep_a.shape
    sim = ad.matmul(rep_a, rep_b.transpose(-1, -2))  # [B, L, L]
    target = torch.eye(l, dtype=sim.dtype).expand(b, l, l).reshape(b * l, l)
    a_to_b = ad.cross_entropy(sim.reshape(b * l, l), target)
    b_to_a = ad.cross_entropy(sim.transpose(-1, -2).reshape(b * l, l), target)
    return lambda_a * (a_to_b + b_to_a)


@dataclass
class GroupOutput:
    """Model outputs for items sharing one presence pattern and one span length."""

    outputs: dict
    labels: torch.Tensor  # [b, L]

    @property
    def present(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if f"logits_{m}" in self.outputs or f"outer_{m}" in self.outputs)

    @property
    def complete(self) -> bool:
        return "logits_mm" in self.outputs


def _weighted_mean(terms: list[tuple[torch.Tensor, int]]):
    n = sum(w for _, w in terms)
    return sum(t * (w / n) for t, w in terms)


def total_loss(groups: list[GroupOutput] | GroupOutput, config: LossConfig) -> LossBreakdown:
    """Compose the objective over a batch split into presence/length groups.

    Complete items contribute joint CE, plus per-modality CE when MS is on and
    alignment when AL is on. Single-modality items contribute only the CE of
    their own modality's predictor. Each term is a mean over the windows (or
    items, for AL) that feed it.
    """
    if isinstance(groups, GroupOutput):
        groups = [groups]
    mm_terms, al_terms = [], []
    uni_terms: dict[str, list] = {m: [] for m in MODALITIES}
    for g in groups:
        n_windows = g.labels.numel()
        if g.complete:
            mm_terms.append((_flat_ce(g.outputs["logits_mm"], g.labels), n_windows))
            if config.ms_enabled:
                for m in MODALITIES:
                    if f"logits_{m}" not in g.outputs:
                        raise ConfigError(f"MS loss enabled but the model produced no {m} logits")
                    uni_terms[m].append((_flat_ce(g.outputs[f"logits_{m}"], g.labels), n_windows))
            if config.al_enabled:
                key = "outer" if config.al_source == "outer" else "cls"
                try:
                    a, b = g.outputs[f"{key}_eeg"], g.outputs[f"{key}_eog"]
                except KeyError:
                    raise ConfigError("alignment loss enabled but per-modality representations are missing") from None
                al_terms.append((alignment_loss(a, b, config.lambda_a, config.al_normalize), g.labels.shape[0]))
        else:
            (m,) = g.present
            uni_terms[m].append((_flat_ce(g.outputs[f"logits_{m}"], g.labels), n_windows))

    zero = torch.zeros((), dtype=next(iter(groups[0].outputs.values())).dtype)
    ce_mm = _weighted_mean(mm_terms) if mm_terms else zero
    ce_uni = {m: _weighted_mean(t) for m, t in uni_terms.items() if t}
    al = _weighted_mean(al_terms) if al_terms else None
    total = ce_mm + sum(ce_uni.values(), zero) + (al if al is not None else zero)
    return LossBreakdown(total=total, ce_multimodal=ce_mm, ce_per_modality=ce_uni, al_value=al)
