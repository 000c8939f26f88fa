"""Recording/feature containers, label rules, patient splits and on-disk formats."""
from __future__ import annotations

import os
import struct
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from ..config import MODALITIES
from ..errors import DataError

EPOCH_S = 30.0


class SleepLabel(IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4


N_LABELS = len(SleepLabel)

# R&K codes as commonly exported: 0 W, 1-4 S1-S4, 5 REM, 6 movement, 9 unscored
_RK_TO_AASM = {0: SleepLabel.W, 1: SleepLabel.N1, 2: SleepLabel.N2, 3: SleepLabel.N3, 4: SleepLabel.N3, 5: SleepLabel.REM}


def merge_rk_labels(rk: np.ndarray) -> np.ndarray:
    """Map R&K stage codes to the 5-label set; movement/unscored become -1."""
    return np.array([_RK_TO_AASM.get(int(c), -1) for c in rk], dtype=np.int64)


@dataclass
class LabeledRecording:
    patient_id: str
    labels: np.ndarray  # [n_epochs] ints 0-4
    signals: dict[str, np.ndarray]  # modality -> raw samples; absent modalities omitted
    rates: dict[str, float]
    noisy: dict[str, np.ndarray] = field(default_factory=dict)  # modality -> [n_epochs] bool

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for m, x in self.signals.items():
            if m not in MODALITIES:
                raise DataError(f"{self.patient_id}: unknown modality {m!r}")
            if self.rates.get(m, 0) <= 0:
                raise DataError(f"{self.patient_id}: modality {m} has no valid sampling rate")
            if len(x) < self.n_epochs * self.samples_per_epoch(m):
                raise DataError(f"{self.patient_id}: {m} does not cover all {self.n_epochs} labeled epochs")
            self.noisy.setdefault(m, np.zeros(self.n_epochs, dtype=bool))

    @property
    def n_epochs(self) -> int:
        return len(self.labels)

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.signals)

    def samples_per_epoch(self, modality: str) -> int:
        return int(round(EPOCH_S * self.rates[modality]))

    def without(self, modality: str) -> "LabeledRecording":
        keep = [m for m in self.modalities if m != modality]
        return LabeledRecording(
            self.patient_id,
            self.labels.copy(),
            {m: self.signals[m] for m in keep},
            {m: self.rates[m] for m in keep},
            {m: self.noisy[m] for m in keep},
        )


@dataclass
class SpectralSequence:
    patient_id: str
    features: dict[str, np.ndarray]  # modality -> float32 [W, T, D]
    labels: np.ndarray  # [W]
    noisy: dict[str, np.ndarray] = field(default_factory=dict)
    start_s: np.ndarray | None = None  # window onset relative to the raw recording

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        w = len(self.labels)
        for m, f in self.features.items():
            if f.ndim != 3 or f.shape[0] != w:
                raise DataError(f"{self.patient_id}: {m} features {f.shape} do not match {w} labels")
            self.noisy.setdefault(m, np.zeros(w, dtype=bool))
        if self.start_s is None:
            self.start_s = np.arange(w) * EPOCH_S

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.features)

    def without(self, modality: str) -> "SpectralSequence":
        keep = [m for m in self.modalities if m != modality]
        return SpectralSequence(
            self.patient_id,
            {m: self.features[m] for m in keep},
            self.labels,
            {m: self.noisy[m] for m in keep},
            self.start_s,
        )


def has_all_labels(labels: np.ndarray) -> bool:
    return set(np.unique(labels).tolist()) >= set(range(N_LABELS))


def trim_wake_edges(labels: np.ndarray) -> slice:
    """Window range kept after shaving excess wake from both ends.

    When wake outnumbers the second most frequent label, drop
    ``floor((#wake - #second) / 2)`` windows from each end, whatever their label.
    """
    n = len(labels)
    if n == 0:
        raise DataError("cannot trim an empty label sequence")
    counts = Counter(int(l) for l in labels)
    wake = counts.get(SleepLabel.W, 0)
    second = max((c for lab, c in counts.items() if lab != SleepLabel.W), default=0)
    if wake <= second:
        return slice(0, n)
    k = min((wake - second) // 2, (n - 1) // 2)
    return slice(k, n - k)


def windowize(sub_labels, per_window: int = 1) -> np.ndarray:
    """Collapse sub-epoch labels to one label per window by majority.

    Ties go to the label that occurs first inside the window.
    """
    sub_labels = np.asarray(sub_labels, dtype=np.int64)
    if per_window < 1:
        raise DataError("per_window must be positive")
    n = len(sub_labels) // per_window
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        chunk = sub_labels[i * per_window : (i + 1) * per_window].tolist()
        counts = Counter(chunk)
        top = max(counts.values())
        out[i] = next(l for l in chunk if counts[l] == top)
    return out


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    seed: int


def split_patients(ids, seed: int = 0, train_fraction: float = 0.7, max_validation: int = 100) -> SplitSpec:
    """Seeded 70/30 patient split, then move validation patients out of train.

    Validation takes ``max_validation`` patients, or 10% of the pool (at least
    one) when the pool is too small for that.
    """
    ids = sorted(set(ids))
    n = len(ids)
    if n < 3:
        raise DataError(f"need at least 3 patients to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = min(n - 1, max(2, int(round(train_fraction * n))))
    n_val = min(max_validation, max(1, int(round(0.1 * n))), n_train - 1)
    train, test = shuffled[:n_train], shuffled[n_train:]
    return SplitSpec(tuple(train[n_val:]), tuple(train[:n_val]), tuple(test), seed)


# ---------------------------------------------------------------- raw dataset


def write_raw_recording(rec: LabeledRecording, root: str | Path) -> Path:
    d = Path(root) / rec.patient_id
    d.mkdir(parents=True, exist_ok=True)
    meta = [f"id = {rec.patient_id}", f"modalities = {','.join(rec.modalities)}"]
    meta += [f"rate.{m} = {rec.rates[m]:g}" for m in rec.modalities]
    (d / "meta").write_text("\n".join(meta) + "\n")
    for m in rec.modalities:
        np.asarray(rec.signals[m], dtype="<f4").tofile(d / f"signal.{m}")
    (d / "labels").write_text("".join(f"{int(l)}\n" for l in rec.labels))
    return d


def read_raw_recording(path: str | Path) -> LabeledRecording:
    d = Path(path)
    try:
        meta = dict(
            (k.strip(), v.strip()) for k, v in (line.split("=", 1) for line in (d / "meta").read_text().splitlines() if "=" in line)
        )
        modalities = [m for m in meta.get("modalities", "").split(",") if m]
        signals = {m: np.fromfile(d / f"signal.{m}", dtype="<f4").astype(np.float64) for m in modalities}
        rates = {m: float(meta[f"rate.{m}"]) for m in modalities}
        labels = np.array([int(x) for x in (d / "labels").read_text().split()], dtype=np.int64)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"malformed raw recording at {d}: {exc}") from exc
    if labels.size and (labels.min() < 0 or labels.max() >= N_LABELS):
        raise DataError(f"{d}: labels must be integers 0-4")
    return LabeledRecording(meta.get("id", d.name), labels, signals, rates)


def list_raw_dataset(root: str | Path) -> list[Path]:
    return sorted(p for p in Path(root).iterdir() if (p / "meta").exists())


# -------------------------------------------------------------- feature cache

_MAGIC = b"CRSF"
_VERSION = 1
_HEADER = struct.Struct("<4sHIHHB")


def _atomic_write(path: Path, payload: bytes) -> None:
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


def write_feature_cache(seq: SpectralSequence, path: str | Path) -> Path:
    """Header, then per modality a length-prefixed name and ``<f4`` features, then ``u1`` labels."""
    path = Path(path)
    mods = seq.modalities
    if not mods:
        raise DataError(f"{seq.patient_id}: nothing to cache")
    w, t, d = seq.features[mods[0]].shape
    parts = [_HEADER.pack(_MAGIC, _VERSION, w, t, d, len(mods))]
    for m in mods:
        name = m.encode()
        parts += [struct.pack("<B", len(name)), name, np.ascontiguousarray(seq.features[m], dtype="<f4").tobytes()]
    parts.append(seq.labels.astype("<u1").tobytes())
    _atomic_write(path, b"".join(parts))
    return path


def read_feature_cache(path: str | Path) -> SpectralSequence:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: truncated feature cache")
    magic, version, w, t, d, n_mod = _HEADER.unpack_from(blob)
    if magic != _MAGIC or version != _VERSION:
        raise DataError(f"{path}: not a version-{_VERSION} feature cache")
    pos, feats = _HEADER.size, {}
    try:
        for _ in range(n_mod):
            (k,) = struct.unpack_from("<B", blob, pos)
            name = blob[pos + 1 : pos + 1 + k].decode()
            pos += 1 + k
            nbytes = w * t * d * 4
            if pos + nbytes > len(blob):
                raise DataError(f"{path}: truncated feature cache")
            feats[name] = np.frombuffer(blob, dtype="<f4", count=w * t * d, offset=pos).reshape(w, t, d).copy()
            pos += nbytes
        if pos + w != len(blob):
            raise DataError(f"{path}: unexpected trailing size")
        labels = np.frombuffer(blob, dtype="<u1", count=w, offset=pos).astype(np.int64)
    except struct.error as exc:
        raise DataError(f"{path}: truncated feature cache") from exc
    return SpectralSequence(path.stem, feats, labels)
