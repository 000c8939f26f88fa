"""Unimodal accuracy of CoRe trained with and without the per-modality losses."""
import argparse

import numpy as np

from coresleep.experiments import desk_config, fit, heldout_accuracy, synthetic_split


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--patients", type=int, default=200)
    args = ap.parse_args()

    split = synthetic_split(args.patients, seed=0)
    rows = {}
    for ms in (True, False):
        for s in args.seeds:
            model, _ = fit(desk_config("core", ms=ms, al=ms, seed=s, steps=args.steps), split.train, split.validation)
            rows.setdefault(ms, []).append(
                [heldout_accuracy(model, split.test, av) for av in (("eeg", "eog"), ("eeg",), ("eog",))]
            )
            print(f"ms={ms} seed={s} mm/eeg/eog = " + " / ".join(f"{a:.1f}" for a in rows[ms][-1]), flush=True)
    for ms, accs in rows.items():
        mean, std = np.mean(accs, 0), np.std(accs, 0)
        print(f"{'with MS+AL' if ms else 'plain':>10}: " + "  ".join(f"{m:.1f}±{s:.1f}" for m, s in zip(mean, std)))


if __name__ == "__main__":
    main()
