"""Accuracy of CoRe and a unimodal EEG model when half of each test EEG channel is noise."""
import argparse

from coresleep.experiments import corrupted, desk_config, fit, heldout_accuracy, synthetic_split


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--fraction", type=float, default=0.5)
    ap.add_argument("--factor", type=float, default=50.0)
    args = ap.parse_args()

    split = synthetic_split(200, seed=0)
    noisy = corrupted(split, "eeg", args.fraction, args.factor)
    core, _ = fit(desk_config("core", seed=args.seed, steps=args.steps), split.train, split.validation)
    uni, _ = fit(desk_config("unimodal", ms=False, al=False, seed=args.seed, steps=args.steps), split.train, split.validation)
    print(f"clean:   core mm {heldout_accuracy(core, split.test):.1f}  unimodal eeg {heldout_accuracy(uni, split.test, ('eeg',)):.1f}")
    print(f"corrupt: core mm {heldout_accuracy(core, noisy):.1f}  core eog {heldout_accuracy(core, noisy, ('eog',)):.1f}  "
          f"unimodal eeg {heldout_accuracy(uni, noisy, ('eeg',)):.1f}")


if __name__ == "__main__":
    main()
