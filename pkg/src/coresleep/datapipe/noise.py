"""Chunk-level STD comparison between channels to find persistently noisy patients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import MODALITIES
from ..errors import DataError
from .records import LabeledRecording


@dataclass(frozen=True)
class NoiseVerdict:
    patient_id: str
    chunk_flags: dict[str, np.ndarray]  # modality -> [n_chunks] bool
    selected: bool

    def flagged_fraction(self, modality: str) -> float:
        return float(np.mean(self.chunk_flags[modality]))

    def report_line(self) -> str:
        fr = ", ".join(f"{self.flagged_fraction(m):.4f}" for m in MODALITIES)
        return f"{self.patient_id}, {fr}, {int(self.selected)}"


def chunk_stds(x: np.ndarray, n_chunks: int) -> np.ndarray:
    return np.array([np.std(c) for c in np.array_split(np.asarray(x, dtype=np.float64), n_chunks)])


def classify_recording(
    rec: LabeledRecording,
    chunk_s: float = 600.0,
    patient_threshold: float = 0.4,
    factor: float = 5.0,
    reference_quantile: float = 0.1,
) -> NoiseVerdict:
    """Flag 10-minute chunks where one channel's relative STD dwarfs the other's.

    Each channel's chunk STDs are divided by a low quantile of that channel's
    own chunk STDs, so the reference level stays clean even when up to
    ``1 - reference_quantile`` of the recording is corrupted. A chunk is
    flagged for ``m`` when its standardized STD exceeds ``factor`` times the
    other channel's. The patient is selected when either channel has more than
    ``patient_threshold`` of its chunks flagged.
    """
    missing = [m for m in MODALITIES if m not in rec.signals]
    if missing:
        raise DataError(f"{rec.patient_id}: noise detection needs both channels, missing {missing}")
    duration = rec.n_epochs * 30.0
    n_chunks = max(1, int(duration // chunk_s))
    z = {}
    for m in MODALITIES:
        s = chunk_stds(rec.signals[m][: rec.n_epochs * rec.samples_per_epoch(m)], n_chunks)
        ref = np.quantile(s, reference_quantile, method="lower")
        z[m] = s / ref if ref > 0 else np.where(s > 0, np.inf, 1.0)
    a, b = MODALITIES
    flags = {a: z[a] > factor * z[b], b: z[b] > factor * z[a]}
    selected = any(np.mean(f) > patient_threshold for f in flags.values())
    return NoiseVerdict(rec.patient_id, flags, bool(selected))


def detect_noisy_patients(recordings, **kwargs) -> tuple[list[str], list[NoiseVerdict]]:
    verdicts = [classify_recording(r, **kwargs) for r in recordings]
    return [v.patient_id for v in verdicts if v.selected], verdicts


def noise_report(verdicts) -> str:
    return "".join(v.report_line() + "\n" for v in verdicts)
