"""Desk-scale experiment building blocks shared by scripts/ and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import DataConfig, LossConfig, ModelConfig, RunConfig, TrainConfig
from .datapipe import (
    LabeledRecording,
    SpectralSequence,
    SynthSpec,
    inject_noise,
    preprocess_recording,
    split_patients,
    synth_generate,
)
from .fusion import build_model
from .metrics import accuracy, confusion_matrix
from .evaluation import predict
from .training import TrainState, restore_best, train


def desk_config(
    fusion: str = "core",
    ms: bool = True,
    al: bool = True,
    seed: int = 0,
    steps: int = 300,
    lr: float = 1e-3,
    modality: str = "eeg",
    precision: str = "float32",
) -> RunConfig:
    """Reduced model, float32, short warmup; every validation checkpoint is kept."""
    return RunConfig(
        ModelConfig.reduced(fusion=fusion, precision=precision, modality=modality),
        LossConfig(ms_enabled=ms, al_enabled=al),
        TrainConfig(base_lr=lr, warmup_steps=50, validate_every=100, patience_steps=10**6, max_steps=steps, seed=seed),
        DataConfig(),
    )


@dataclass
class SyntheticSplit:
    recordings: dict[str, LabeledRecording]
    train: list[SpectralSequence]
    validation: list[SpectralSequence]
    test: list[SpectralSequence]


def synthetic_split(n_patients: int = 200, windows: int = 100, seed: int = 0) -> SyntheticSplit:
    recs = synth_generate(SynthSpec(seed=seed), n_patients, windows)
    seqs = {s.patient_id: s for s in (preprocess_recording(r) for r in recs) if s is not None}
    sp = split_patients(list(seqs), seed=seed)
    return SyntheticSplit(
        {r.patient_id: r for r in recs},
        [seqs[i] for i in sp.train],
        [seqs[i] for i in sp.validation],
        [seqs[i] for i in sp.test],
    )


def eeg_only_patients(n: int, windows: int = 100, seed: int = 0, prefix: str = "U") -> list[SpectralSequence]:
    """Extra patients from an independent generator stream with the EOG channel removed."""
    out = []
    for r in synth_generate(SynthSpec(seed=10_000 + seed), n, windows):
        s = preprocess_recording(r.without("eog"))
        if s is not None:
            s.patient_id = prefix + s.patient_id
            out.append(s)
    return out


def corrupted(split: SyntheticSplit, modality: str = "eeg", fraction: float = 0.5, factor: float = 50.0) -> list[SpectralSequence]:
    """Test patients with ``fraction`` of one channel replaced by noise; no wake trimming so spans line up."""
    out = []
    for k, s in enumerate(split.test):
        rec = inject_noise(split.recordings[s.patient_id], modality, fraction, factor, seed=k)
        out.append(preprocess_recording(rec, trim=False))
    return out


def fit(cfg: RunConfig, train_seqs, val_seqs, threads: int | None = 1) -> tuple[torch.nn.Module, TrainState]:
    if threads:
        torch.set_num_threads(threads)
    model = build_model(cfg.model, seed=cfg.training.seed)
    state = train(model, train_seqs, val_seqs, cfg)
    restore_best(model, state)
    return model, state


def heldout_accuracy(model, sequences, available=("eeg", "eog")) -> float:
    y = np.concatenate([s.labels for s in sequences])
    return accuracy(confusion_matrix(y, np.concatenate(predict(model, sequences, available))))
