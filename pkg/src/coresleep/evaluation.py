"""Condition-matrix evaluation, reports, hypnogram export and run manifests."""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .config import LABELS, MODALITIES
from .datapipe.records import SpectralSequence
from .errors import ConfigError, DataError
from .fusion import infer_with_missing
from .metrics import confusion_matrix, per_label_f1, summarize

CONDITIONS = {"both": ("eeg", "eog"), "eeg_only": ("eeg",), "eog_only": ("eog",), "noisy_subset": ("eeg", "eog")}


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def predict_logits(model: nn.Module, seq: SpectralSequence, available, span: int = 21, batch_size: int = 16) -> torch.Tensor:
    """``[W, C]`` logits for one sequence, scored in consecutive spans of ``span`` windows."""
    available = tuple(m for m in MODALITIES if m in available)
    missing = [m for m in available if m not in seq.features]
    if missing:
        raise DataError(f"{seq.patient_id} has no {missing} features")
    w, dtype = len(seq), _dtype(model)
    n_full = w // span
    chunks = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            pieces = [(i * span, (i + 1) * span) for i in range(n_full)]
            for i in range(0, n_full, batch_size):
                sel = pieces[i : i + batch_size]
                x = {m: torch.from_numpy(np.stack([seq.features[m][a:b] for a, b in sel])).to(dtype) for m in available}
                chunks.append(infer_with_missing(model, available, **x).reshape(-1, model.cfg.n_classes))
            if n_full * span < w:
                x = {m: torch.from_numpy(seq.features[m][n_full * span :][None]).to(dtype) for m in available}
                chunks.append(infer_with_missing(model, available, **x).reshape(-1, model.cfg.n_classes))
    finally:
        model.train(was_training)
    return torch.cat(chunks)


def predict(model: nn.Module, sequences: Sequence[SpectralSequence], available, span: int = 21) -> list[np.ndarray]:
    return [predict_logits(model, s, available, span).argmax(-1).numpy() for s in sequences]


@dataclass
class ConditionResult:
    cm: np.ndarray
    n_patients: int
    note: str = ""

    @property
    def n_windows(self) -> int:
        return int(self.cm.sum())

    def metrics(self) -> dict[str, float]:
        if self.n_windows == 0:
            return {}
        return summarize(self.cm)


@dataclass
class EvalReport:
    results: dict[str, ConditionResult] = field(default_factory=dict)
    manifest: str = ""

    def to_text(self) -> str:
        lines = [f"manifest: {self.manifest}"] if self.manifest else []
        for name, r in self.results.items():
            if r.n_windows == 0:
                lines.append(f"{name}: {r.note or 'no windows'}")
                continue
            m = r.metrics()
            f1 = " ".join(f"{lab}={100 * v:.1f}" for lab, v in zip(LABELS, per_label_f1(r.cm)))
            lines.append(
                f"{name}: acc {m['accuracy']:.2f}%  kappa {m['kappa']:.4f}  macro-F1 {m['macro_f1']:.2f}%"
                f"  ({r.n_windows} windows, {r.n_patients} patients)"
            )
            lines.append(f"  per-label F1: {f1}")
            lines += ["  cm " + " ".join(f"{int(c):6d}" for c in row) for row in r.cm]
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        lines = [f"manifest = {self.manifest}"]
        for name, r in self.results.items():
            lines.append(f"{name}.windows = {r.n_windows}")
            lines.append(f"{name}.patients = {r.n_patients}")
            if r.note:
                lines.append(f"{name}.note = {r.note}")
            for k, v in r.metrics().items():
                lines.append(f"{name}.{k} = {float(v)!r}")
            if r.n_windows:
                for lab, v in zip(LABELS, per_label_f1(r.cm)):
                    lines.append(f"{name}.f1.{lab} = {100 * float(v)!r}")
            lines.append(f"{name}.cm = " + ",".join(str(int(c)) for c in r.cm.ravel()))
        return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    return dict((k.strip(), v.strip()) for k, v in (l.split("=", 1) for l in text.splitlines() if "=" in l))


def evaluate(
    model: nn.Module,
    sequences: Sequence[SpectralSequence],
    conditions: Iterable[str] = ("both", "eeg_only", "eog_only"),
    noisy_ids: Iterable[str] | None = None,
    span: int = 21,
) -> EvalReport:
    """One pass per condition; ``noisy_subset`` needs ``noisy_ids`` from the noise detector."""
    report = EvalReport()
    n_classes = model.cfg.n_classes
    for cond in conditions:
        if cond not in CONDITIONS:
            raise ConfigError(f"unknown condition {cond!r}; choose from {sorted(CONDITIONS)}")
        need = CONDITIONS[cond]
        pool = list(sequences)
        note = ""
        if cond == "noisy_subset":
            if noisy_ids is None:
                raise ConfigError("noisy_subset requires the ids selected by the noise detector")
            chosen = set(noisy_ids)
            pool = [s for s in pool if s.patient_id in chosen]
            if not chosen:
                note = "no patients selected"
            elif not pool:
                note = "no selected patients among the evaluated sequences"
        usable = [s for s in pool if all(m in s.features for m in need)]
        if pool and len(usable) < len(pool):
            warnings.warn(f"{cond}: skipping {len(pool) - len(usable)} sequences lacking {need}", stacklevel=2)
        if pool and not usable:
            note = f"skipped: no sequences with {'+'.join(need)}"
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        if usable:
            preds = predict(model, usable, need, span)
            cm = confusion_matrix(np.concatenate([s.labels for s in usable]), np.concatenate(preds), n_classes)
        report.results[cond] = ConditionResult(cm, len(usable), note)
    return report


def aggregate_reports(reports: Sequence[EvalReport]) -> str:
    """Mean and standard deviation of each metric across repeated runs."""
    lines = [f"repeats: {len(reports)}"]
    for cond in reports[0].results:
        rows = [r.results[cond].metrics() for r in reports if r.results[cond].n_windows]
        if not rows:
            lines.append(f"{cond}: no windows")
            continue
        parts = []
        for key in ("accuracy", "kappa", "macro_f1"):
            v = np.array([row[key] for row in rows])
            parts.append(f"{key} {v.mean():.4f} ± {v.std():.4f}")
        lines.append(f"{cond}: " + "  ".join(parts))
    return "\n".join(lines) + "\n"


def export_hypnogram(model: nn.Module, seq: SpectralSequence, path: str | Path, manifest: str = "") -> Path:
    """Text table ``index, true, pred_mm, pred_eeg, pred_eog`` with label names."""
    path = Path(path)
    cols = {}
    for name, avail in (("pred_mm", ("eeg", "eog")), ("pred_eeg", ("eeg",)), ("pred_eog", ("eog",))):
        if all(m in seq.features for m in avail):
            cols[name] = [LABELS[i] for i in predict_logits(model, seq, avail).argmax(-1).tolist()]
        else:
            cols[name] = ["-"] * len(seq)
    lines = [f"# manifest = {manifest}"] if manifest else []
    lines.append("index, true, pred_mm, pred_eeg, pred_eog")
    for i, lab in enumerate(seq.labels.tolist()):
        lines.append(f"{i}, {LABELS[lab]}, {cols['pred_mm'][i]}, {cols['pred_eeg'][i]}, {cols['pred_eog'][i]}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_hypnogram(path: str | Path) -> list[tuple[str, ...]]:
    rows = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
    return [tuple(c.strip() for c in r.split(",")) for r in rows[1:]]


# -------------------------------------------------------------- run manifest


def dataset_digest(sequences: Sequence[SpectralSequence]) -> str:
    h = hashlib.sha256()
    for s in sorted(sequences, key=lambda s: s.patient_id):
        h.update(s.patient_id.encode())
        for m in s.modalities:
            h.update(m.encode())
            h.update(np.ascontiguousarray(s.features[m]).tobytes())
        h.update(s.labels.tobytes())
    return h.hexdigest()


def code_digest() -> str:
    """Content hash of the package sources, in the spirit of a git tree hash."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        data = p.read_bytes()
        h.update(f"blob {len(data)}\0{p.relative_to(root)}\0".encode())
        h.update(data)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    dataset: str
    code: str
    seed: int
    outputs: list[str] = field(default_factory=list)

    @property
    def digest(self) -> str:
        blob = json.dumps({"config": self.config, "dataset": self.dataset, "code": self.code, "seed": self.seed}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / f"manifest-{self.digest}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        body = {"digest": self.digest, "config": self.config, "dataset": self.dataset, "code": self.code,
                "seed": self.seed, "outputs": self.outputs}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path
