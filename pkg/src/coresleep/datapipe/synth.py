"""Seeded synthetic two-channel sleep recordings.

Labels follow a Markov chain. Each 30 s epoch of each channel is a sum of
sinusoids whose amplitudes depend on the label, plus white noise. The default
profiles are built so that neither channel alone identifies every label:

* EEG cannot tell N1 from REM (identical band profile),
* EOG cannot tell N2 from N3,
* a coupling component separates N1 from REM only jointly: for N1 it shows up
  in exactly one channel, for REM in both or neither.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import DataError
from .records import EPOCH_S, N_LABELS, LabeledRecording, SleepLabel

_W, _N1, _N2, _N3, _REM = range(5)


def _default_transitions() -> np.ndarray:
    return np.array(
        [
            [0.86, 0.09, 0.03, 0.00, 0.02],
            [0.08, 0.62, 0.23, 0.00, 0.07],
            [0.03, 0.03, 0.86, 0.05, 0.03],
            [0.02, 0.00, 0.10, 0.88, 0.00],
            [0.04, 0.04, 0.04, 0.00, 0.88],
        ]
    )


@dataclass(frozen=True)
class BandProfile:
    freqs_hz: tuple[float, ...]
    amplitudes: tuple[tuple[float, ...], ...]  # [label][component]


def _default_profiles() -> dict[str, BandProfile]:
    return {
        # delta, theta, alpha, sigma, beta
        "eeg": BandProfile(
            (1.5, 6.0, 10.0, 13.0, 22.0),
            (
                (0.3, 0.4, 1.5, 0.2, 0.8),
                (0.4, 1.2, 0.4, 0.2, 0.3),
                (0.6, 0.8, 0.2, 1.3, 0.2),
                (2.0, 0.5, 0.1, 0.3, 0.1),
                (0.4, 1.2, 0.4, 0.2, 0.3),
            ),
        ),
        # slow eye movements, low drift, rapid eye movements, muscle
        "eog": BandProfile(
            (0.8, 2.0, 4.0, 15.0),
            (
                (0.5, 0.6, 0.8, 1.0),
                (1.5, 0.3, 0.2, 0.3),
                (0.4, 0.5, 0.1, 0.2),
                (0.4, 0.5, 0.1, 0.2),
                (0.3, 0.3, 1.5, 0.2),
            ),
        ),
    }


@dataclass(frozen=True)
class SynthSpec:
    transitions: np.ndarray = field(default_factory=_default_transitions)
    profiles: dict[str, BandProfile] = field(default_factory=_default_profiles)
    rates: dict[str, float] = field(default_factory=lambda: {"eeg": 125.0, "eog": 50.0})
    coupling: float = 0.8  # amplitude of the jointly-coded component
    coupling_freqs: dict[str, float] = field(default_factory=lambda: {"eeg": 17.0, "eog": 7.0})
    coupling_labels: tuple[int, int] = (_N1, _REM)  # (exactly-one-channel, both-or-neither)
    noise_floor: float = 0.3
    amplitude_jitter: float = 0.25  # log-normal sigma per component and epoch
    patient_gain_jitter: float = 0.2
    initial_label: int = _W
    require_all_labels: bool = True
    seed: int = 0

    def __post_init__(self):
        t = np.asarray(self.transitions, dtype=np.float64)
        if t.shape != (N_LABELS, N_LABELS) or (t < 0).any() or not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
            raise DataError("transition matrix must be 5x5, non-negative, with rows summing to 1")
        for m, prof in self.profiles.items():
            if len(prof.amplitudes) != N_LABELS or any(len(a) != len(prof.freqs_hz) for a in prof.amplitudes):
                raise DataError(f"band profile for {m} must list one amplitude per component for each label")
            if max(prof.freqs_hz + (self.coupling_freqs[m],)) >= self.rates[m] / 2:
                raise DataError(f"{m} components must stay below Nyquist")

    def with_seed(self, seed: int) -> "SynthSpec":
        return replace(self, seed=seed)


def stationary_distribution(transitions: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(np.asarray(transitions).T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    return v / v.sum()


def sample_chain(transitions: np.ndarray, n: int, rng: np.random.Generator, initial: int = 0) -> np.ndarray:
    cum = np.cumsum(np.asarray(transitions), axis=1)
    u = rng.random(n)
    out = np.empty(n, dtype=np.int64)
    state = initial
    for i in range(n):
        out[i] = state
        state = min(int(np.searchsorted(cum[state], u[i], side="right")), N_LABELS - 1)
    return out


def _channel(spec: SynthSpec, m: str, labels: np.ndarray, coupled: np.ndarray, gain: float, rng) -> np.ndarray:
    prof = spec.profiles[m]
    rate = spec.rates[m]
    n = int(round(EPOCH_S * rate))
    t = np.arange(n) / rate
    amps = np.asarray(prof.amplitudes)[labels]  # [E, K]
    amps = amps * np.exp(rng.normal(0.0, spec.amplitude_jitter, amps.shape))
    freqs = np.asarray(prof.freqs_hz) * rng.uniform(0.95, 1.05, amps.shape)
    phase = rng.uniform(0, 2 * np.pi, amps.shape)
    x = np.einsum("ek,ekn->en", amps, np.sin(2 * np.pi * freqs[..., None] * t + phase[..., None]))
    cf = spec.coupling_freqs[m] * rng.uniform(0.95, 1.05, len(labels))
    cphase = rng.uniform(0, 2 * np.pi, len(labels))
    x += spec.coupling * coupled[:, None] * np.sin(2 * np.pi * cf[:, None] * t + cphase[:, None])
    x += rng.normal(0.0, spec.noise_floor, x.shape)
    return (gain * x).reshape(-1)


def synth_recording(spec: SynthSpec, patient_id: str, n_windows: int, rng: np.random.Generator) -> LabeledRecording:
    for _ in range(1000):
        labels = sample_chain(spec.transitions, n_windows, rng, spec.initial_label)
        if not spec.require_all_labels or len(np.unique(labels)) == N_LABELS:
            break
    else:
        raise DataError(f"could not sample a chain covering all labels in {n_windows} windows")
    one, both = spec.coupling_labels
    coin = rng.random(len(labels)) < 0.5
    coupled_eeg = np.where(labels == one, coin, np.where(labels == both, coin, False))
    coupled_eog = np.where(labels == one, ~coin, np.where(labels == both, coin, False))
    coupled = {"eeg": coupled_eeg.astype(float), "eog": coupled_eog.astype(float)}
    signals = {}
    for m in spec.profiles:
        gain = float(np.exp(rng.normal(0.0, spec.patient_gain_jitter)))
        signals[m] = _channel(spec, m, labels, coupled[m], gain, rng)
    return LabeledRecording(patient_id, labels, signals, dict(spec.rates))


def synth_generate(spec: SynthSpec, n_patients: int, windows_per_patient: int) -> list[LabeledRecording]:
    """``n_patients`` recordings, each fully determined by ``spec.seed`` and its index."""
    if n_patients < 1 or windows_per_patient < 1:
        raise DataError("need at least one patient and one window")
    recs = []
    for i in range(n_patients):
        rng = np.random.default_rng([spec.seed, i])
        recs.append(synth_recording(spec, f"P{i:04d}", windows_per_patient, rng))
    return recs


def inject_noise(
    rec: LabeledRecording,
    modality: str,
    fraction: float,
    amplitude_factor: float = 50.0,
    seed: int = 0,
    at: str = "end",
) -> LabeledRecording:
    """Replace a contiguous span of one channel with high-variance Gaussian noise.

    The span covers ``fraction`` of the labeled duration and sits at the end
    (``at="end"``) or start of the recording. The noise std is
    ``amplitude_factor`` times the clean channel std. Labels are unchanged;
    touched epochs are flagged in ``rec.noisy``.
    """
    if modality not in rec.signals:
        raise DataError(f"{rec.patient_id} has no {modality} channel")
    if not 0.0 <= fraction <= 1.0:
        raise DataError("noise fraction must lie in [0, 1]")
    if at not in ("end", "start"):
        raise DataError("at must be 'end' or 'start'")
    spe = rec.samples_per_epoch(modality)
    n = rec.n_epochs * spe
    x = rec.signals[modality].copy()
    noisy = {m: f.copy() for m, f in rec.noisy.items()}
    width = int(round(fraction * n))
    if width:
        lo, hi = (n - width, n) if at == "end" else (0, width)
        std = float(np.std(x[:n]))
        x[lo:hi] = np.random.default_rng(seed).normal(0.0, amplitude_factor * std, hi - lo)
        epochs = np.arange(rec.n_epochs)
        noisy[modality] |= (epochs * spe < hi) & ((epochs + 1) * spe > lo)
    signals = dict(rec.signals)
    signals[modality] = x
    return LabeledRecording(rec.patient_id, rec.labels.copy(), signals, dict(rec.rates), noisy)
