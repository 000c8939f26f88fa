"""Resampling, zero-phase band-pass filtering and log-magnitude STFT features."""
from __future__ import annotations

from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import signal as sps

from ..errors import DataError
from .records import EPOCH_S, LabeledRecording, SpectralSequence, has_all_labels, trim_wake_edges

TARGET_HZ = 100
BANDS = {"eeg": (0.3, 40.0), "eog": (0.3, 23.0)}
FRAME = 200  # 2 s at 100 Hz
HOP = 100  # 1 s
NFFT = 256
LOG_EPS = 1e-6


def resample(x: np.ndarray, from_hz: float, to_hz: float = TARGET_HZ) -> np.ndarray:
    """Polyphase rational resampling with a Kaiser-windowed anti-alias filter."""
    if from_hz <= 0 or to_hz <= 0:
        raise DataError(f"sampling rates must be positive, got {from_hz} -> {to_hz}")
    x = np.asarray(x, dtype=np.float64)
    n_out = int(round(len(x) * to_hz / from_hz))
    if from_hz == to_hz:
        return x.copy()
    ratio = Fraction(to_hz / from_hz).limit_denominator(1000)
    y = sps.resample_poly(x, ratio.numerator, ratio.denominator, window=("kaiser", 5.0))
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)), mode="edge")
    return y[:n_out]


@lru_cache(maxsize=32)
def bandpass_taps(hz: float, low: float, high: float) -> np.ndarray:
    """Hamming-windowed linear-phase band-pass; transition width equals ``low``."""
    if not 0 < low < high < hz / 2:
        raise DataError(f"band ({low}, {high}) must lie inside (0, {hz / 2})")
    # Hamming main-lobe width is ~3.3 fs / N
    n = int(np.ceil(3.3 * hz / low)) | 1
    return sps.firwin(n, [low, high], pass_zero=False, window="hamming", fs=hz)


def _odd_extend(x: np.ndarray, n: int) -> np.ndarray:
    left = 2 * x[0] - x[n:0:-1]
    right = 2 * x[-1] - x[-2 : -n - 2 : -1]
    return np.concatenate([left, x, right])


def fir_bandpass(x: np.ndarray, hz: float, band: tuple[float, float]) -> np.ndarray:
    """Forward-backward (zero-phase) application of ``bandpass_taps``."""
    taps = bandpass_taps(float(hz), float(band[0]), float(band[1]))
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        raise DataError("signal too short to filter")
    pad = min(3 * len(taps), len(x) - 1)
    ext = _odd_extend(x, pad)
    y = sps.oaconvolve(ext, taps)[: len(ext)]
    y = sps.oaconvolve(y[::-1], taps)[: len(ext)][::-1]
    return y[pad : pad + len(x)]


@lru_cache(maxsize=1)
def _window() -> np.ndarray:
    return sps.get_window("hamming", FRAME, fftbins=False)


def stft_frames(windows: np.ndarray) -> np.ndarray:
    """``[..., 3000]`` samples -> ``[..., 29, 200]`` overlapping frames."""
    return np.lib.stride_tricks.sliding_window_view(windows, FRAME, axis=-1)[..., ::HOP, :]


def stft_features(x: np.ndarray) -> np.ndarray:
    """Log-magnitude spectrogram of 30 s windows at 100 Hz.

    Accepts one window ``[3000]`` or a stack ``[W, 3000]``; returns ``[29, 128]``
    or ``[W, 29, 128]``. The 256-point one-sided spectrum has 129 bins and the
    DC bin is dropped.
    """
    x = np.asarray(x, dtype=np.float64)
    n = int(EPOCH_S * TARGET_HZ)
    if x.shape[-1] != n:
        raise DataError(f"stft_features expects {n} samples per window, got {x.shape[-1]}")
    spec = np.fft.rfft(stft_frames(x) * _window(), n=NFFT, axis=-1)
    return np.log(np.abs(spec[..., 1:]) + LOG_EPS)


def preprocess_recording(rec: LabeledRecording, trim: bool = True) -> SpectralSequence | None:
    """Raw recording -> features, or ``None`` when it lacks one of the five labels."""
    if not has_all_labels(rec.labels):
        return None
    keep = trim_wake_edges(rec.labels) if trim else slice(0, rec.n_epochs)
    per_window = int(EPOCH_S * TARGET_HZ)
    feats = {}
    for m in rec.modalities:
        x = rec.signals[m][: rec.n_epochs * rec.samples_per_epoch(m)]
        x = fir_bandpass(resample(x, rec.rates[m]), TARGET_HZ, BANDS[m])
        x = x[keep.start * per_window : keep.stop * per_window].reshape(-1, per_window)
        feats[m] = stft_features(x).astype(np.float32)
    return SpectralSequence(
        rec.patient_id,
        feats,
        rec.labels[keep],
        {m: rec.noisy[m][keep] for m in rec.modalities},
        np.arange(keep.start, keep.stop) * EPOCH_S,
    )
