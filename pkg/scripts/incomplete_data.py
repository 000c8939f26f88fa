"""Does adding EEG-only patients to training hurt multimodal accuracy?"""
import argparse

import numpy as np

from coresleep.experiments import desk_config, eeg_only_patients, fit, heldout_accuracy, synthetic_split


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--extra", type=int, default=100)
    args = ap.parse_args()

    split = synthetic_split(200, seed=0)
    base = split.train[:100]
    extra = eeg_only_patients(args.extra)
    deltas = []
    for s in args.seeds:
        cfg = desk_config("core", seed=s, steps=args.steps)
        a = heldout_accuracy(fit(cfg, base, split.validation)[0], split.test)
        b = heldout_accuracy(fit(cfg, base + extra, split.validation)[0], split.test)
        deltas.append(b - a)
        print(f"seed {s}: multimodal only {a:.2f}  with EEG-only extras {b:.2f}", flush=True)
    print(f"mean change {np.mean(deltas):+.2f} points")


if __name__ == "__main__":
    main()
