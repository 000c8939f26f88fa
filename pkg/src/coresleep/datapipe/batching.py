"""Span/batch assembly over spectral sequences with per-item modality presence."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch

from ..config import MODALITIES
from .records import SpectralSequence


@dataclass(frozen=True)
class Span:
    seq: int  # index into the sequence list
    start: int
    stop: int
    present: tuple[str, ...]

    def __len__(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class Batch:
    batch_id: int
    spans: tuple[Span, ...]

    @property
    def n_labels(self) -> int:
        return sum(len(s) for s in self.spans)


@dataclass
class Group:
    """Items of one batch sharing presence pattern and span length, stacked."""

    present: tuple[str, ...]
    inputs: dict[str, torch.Tensor]  # modality -> [b, L, T, D]
    labels: torch.Tensor  # [b, L]
    spans: tuple[Span, ...]


def make_spans(sequences: Sequence[SpectralSequence], span: int = 21) -> list[Span]:
    """Chop every sequence into consecutive spans of ``span`` windows; the tail span may be shorter."""
    out = []
    for i, seq in enumerate(sequences):
        for start in range(0, len(seq), span):
            out.append(Span(i, start, min(start + span, len(seq)), seq.modalities))
    return out


def assemble_batches(
    sequences: Sequence[SpectralSequence], batch_size: int = 16, span: int = 21, seed: int | None = 0, epoch: int = 0
) -> list[Batch]:
    """One epoch of batches. ``seed=None`` keeps chronological order (for evaluation)."""
    spans = make_spans(sequences, span)
    if seed is not None:
        order = np.random.default_rng([seed, epoch]).permutation(len(spans))
        spans = [spans[i] for i in order]
    return [Batch(k, tuple(spans[i : i + batch_size])) for k, i in enumerate(range(0, len(spans), batch_size))]


def iter_batches(sequences, batch_size: int = 16, span: int = 21, seed: int = 0) -> Iterator[Batch]:
    """Endless stream; epoch ``e`` is reshuffled with ``(seed, e)``."""
    epoch = 0
    while True:
        yield from assemble_batches(sequences, batch_size, span, seed, epoch)
        epoch += 1


def group_batch(batch: Batch, sequences: Sequence[SpectralSequence], dtype=torch.float64) -> list[Group]:
    buckets: dict[tuple, list[Span]] = defaultdict(list)
    for s in batch.spans:
        buckets[(s.present, len(s))].append(s)
    groups = []
    for (present, _), spans in sorted(buckets.items(), key=lambda kv: (MODALITIES.index(kv[0][0][0]), len(kv[0][0]), kv[0][1])):
        inputs = {
            m: torch.from_numpy(np.stack([sequences[s.seq].features[m][s.start : s.stop] for s in spans])).to(dtype)
            for m in present
        }
        labels = torch.from_numpy(np.stack([sequences[s.seq].labels[s.start : s.stop] for s in spans]))
        groups.append(Group(present, inputs, labels, tuple(spans)))
    return groups
