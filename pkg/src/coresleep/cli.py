"""Command-line entry point: synth, preprocess, train, eval, detect-noise, export-hypnogram."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .datapipe import (
    SynthSpec,
    detect_noisy_patients,
    inject_noise,
    list_raw_dataset,
    noise_report,
    preprocess_recording,
    read_feature_cache,
    read_raw_recording,
    split_patients,
    synth_generate,
    write_feature_cache,
    write_raw_recording,
)
from .errors import ConfigError, CoreSleepError, DataError
from .evaluation import CONDITIONS, RunManifest, aggregate_reports, code_digest, dataset_digest, evaluate, export_hypnogram
from .training import load_checkpoint, restore_best, save_checkpoint, train
from .fusion import build_model


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="config file (sections model/loss/training/data)")
    parser.add_argument("--seed", type=int, default=d(None), help="overrides training.seed and the split seed")
    parser.add_argument("--out", default=d("."), help="output directory; relative paths resolve against it")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coresleep", description=__doc__)
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic raw dataset")
    s.add_argument("--patients", type=int, default=None)
    s.add_argument("--windows", type=int, default=None)
    s.add_argument("--noise-patients", type=int, default=0, help="corrupt EEG of the first N patients")
    s.add_argument("--noise-fraction", type=float, default=0.5)
    s.add_argument("--raw", default="raw")

    s = sub.add_parser("preprocess", parents=[common], help="raw dataset -> feature cache")
    s.add_argument("--raw", default="raw")
    s.add_argument("--features", default="features")

    s = sub.add_parser("train", parents=[common], help="train on the feature cache")
    s.add_argument("--features", default="features")
    s.add_argument("--repeat", type=int, default=1, help="train k runs with seeds seed..seed+k-1")

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    s.add_argument("--checkpoint", default=None, help="checkpoint path (default: checkpoint-s<seed>.crsc)")
    s.add_argument("--features", default="features")
    s.add_argument("--raw", default=None, help="raw dataset, needed for the noisy_subset condition")
    s.add_argument("--conditions", default="both,eeg_only,eog_only")
    s.add_argument("--repeat", type=int, default=1, help="aggregate runs for seeds seed..seed+k-1")

    s = sub.add_parser("detect-noise", parents=[common], help="noise report for a raw dataset")
    s.add_argument("--raw", default="raw")

    s = sub.add_parser("export-hypnogram", parents=[common], help="per-window predictions for one patient")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--features", default="features")
    s.add_argument("--patient", required=True)
    return p


def _path(args, p: str | None) -> Path:
    return Path(args.out) / p if p is not None else Path(args.out)


def _config(args, seed: int | None = None):
    seed = args.seed if seed is None else seed
    return load_config(args.config, **({"training": {"seed": seed}} if seed is not None else {}))


def _seeds(args) -> list[int]:
    cfg = _config(args)
    return [cfg.training.seed + k for k in range(max(1, getattr(args, "repeat", 1)))]


def _load_features(args):
    d = _path(args, args.features)
    files = sorted(d.glob("*.crsf"))
    if not files:
        raise DataError(f"no feature files in {d}; run `preprocess` first")
    return {s.patient_id: s for s in map(read_feature_cache, files)}


def _split(seqs, seed):
    sp = split_patients(list(seqs), seed=seed)
    return [seqs[i] for i in sp.train], [seqs[i] for i in sp.validation], [seqs[i] for i in sp.test]


def _manifest(cfg, seqs, outputs) -> RunManifest:
    return RunManifest(cfg.to_dict(), dataset_digest(list(seqs)), code_digest(), cfg.training.seed, outputs)


def cmd_synth(args) -> None:
    cfg = _config(args)
    n = args.patients or cfg.data.n_patients
    w = args.windows or cfg.data.windows_per_patient
    recs = synth_generate(SynthSpec(seed=cfg.training.seed), n, w)
    root = _path(args, args.raw)
    for k, r in enumerate(recs):
        if k < args.noise_patients:
            r = inject_noise(r, "eeg", args.noise_fraction, 50.0, seed=k)
        write_raw_recording(r, root)
    print(f"wrote {len(recs)} recordings to {root}")


def cmd_preprocess(args) -> None:
    kept = dropped = 0
    out = _path(args, args.features)
    for d in list_raw_dataset(_path(args, args.raw)):
        seq = preprocess_recording(read_raw_recording(d))
        if seq is None:
            dropped += 1
            continue
        write_feature_cache(seq, out / f"{seq.patient_id}.crsf")
        kept += 1
    print(f"cached {kept} recordings in {out}; discarded {dropped} lacking a label")


def cmd_train(args) -> None:
    seqs = _load_features(args)
    for seed in _seeds(args):
        cfg = _config(args, seed)
        tr, va, _ = _split(seqs, seed)
        model = build_model(cfg.model, seed=seed)
        log = _path(args, f"train-s{seed}.log")
        log.parent.mkdir(parents=True, exist_ok=True)
        with log.open("w") as fh:
            manifest = _manifest(cfg, seqs.values(), [log.name, f"checkpoint-s{seed}.crsc"])
            fh.write(f"# manifest = {manifest.digest}\n")
            state = train(model, tr, va, cfg, on_step=lambda s, l: fh.write(f"{s.step} {s.loss_history[-1]!r}\n"))
            for step, acc in state.val_history:
                fh.write(f"# validation {step} {acc!r}\n")
        ckpt = save_checkpoint(state, model, cfg, _path(args, f"checkpoint-s{seed}.crsc"))
        manifest.write(args.out)
        print(f"seed {seed}: {state.step} steps, best validation accuracy {state.best_metric:.2f}% -> {ckpt}")


def _restore(args, cfg, seed):
    ckpt = Path(args.checkpoint) if args.checkpoint else _path(args, f"checkpoint-s{seed}.crsc")
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} not found; run `train` first or pass --checkpoint")
    model, state = load_checkpoint(ckpt, cfg)
    restore_best(model, state)
    return model


def cmd_eval(args) -> None:
    conditions = [c.strip() for c in args.conditions.split(",") if c.strip()]
    for c in conditions:
        if c not in CONDITIONS:
            raise ConfigError(f"unknown condition {c!r}")
    seqs = _load_features(args)
    noisy_ids = None
    if "noisy_subset" in conditions:
        if args.raw is None:
            raise ConfigError("noisy_subset needs --raw to run the noise detector")
        cfg0 = _config(args)
        recs = [read_raw_recording(d) for d in list_raw_dataset(_path(args, args.raw))]
        noisy_ids, _ = _detect(recs, cfg0)
    reports = []
    for seed in _seeds(args):
        cfg = _config(args, seed)
        model = _restore(args, cfg, seed)
        _, _, te = _split(seqs, seed)
        rep = evaluate(model, te, conditions, noisy_ids=noisy_ids, span=cfg.training.span)
        rep.manifest = _manifest(cfg, seqs.values(), [f"eval-s{seed}.txt", f"eval-s{seed}.kv"]).digest
        _path(args, f"eval-s{seed}.txt").write_text(rep.to_text())
        _path(args, f"eval-s{seed}.kv").write_text(rep.to_kv())
        reports.append(rep)
        print(rep.to_text(), end="")
    if len(reports) > 1:
        agg = aggregate_reports(reports)
        _path(args, "eval-aggregate.txt").write_text(agg)
        print(agg, end="")


def _detect(recs, cfg):
    d = cfg.data
    return detect_noisy_patients(
        recs,
        chunk_s=d.noise_chunk_s,
        patient_threshold=d.noise_patient_threshold,
        factor=d.noise_factor,
        reference_quantile=d.noise_reference_quantile,
    )


def cmd_detect_noise(args) -> None:
    cfg = _config(args)
    recs = [read_raw_recording(d) for d in list_raw_dataset(_path(args, args.raw))]
    selected, verdicts = _detect(recs, cfg)
    out = _path(args, "noise_report.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(noise_report(verdicts))
    print(f"{len(selected)} of {len(verdicts)} patients selected -> {out}")


def cmd_export_hypnogram(args) -> None:
    cfg = _config(args)
    seqs = _load_features(args)
    if args.patient not in seqs:
        raise DataError(f"no features for patient {args.patient}")
    model = _restore(args, cfg, cfg.training.seed)
    digest = _manifest(cfg, seqs.values(), []).digest
    path = export_hypnogram(model, seqs[args.patient], _path(args, f"hypnogram-{args.patient}.txt"), digest)
    print(f"wrote {path}")


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "detect-noise": cmd_detect_noise,
    "export-hypnogram": cmd_export_hypnogram,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except (CoreSleepError, OSError) as exc:
        print(f"coresleep {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
