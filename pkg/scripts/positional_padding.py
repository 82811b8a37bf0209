"""Zero versus circular d-FCN padding on the top-left-quadrant task.

Zero padding lets convolutions see where the image border is; circular
padding removes that cue. Trains both variants per seed and reports the
held-out Dice of each.

    python scripts/positional_padding.py --seeds 0 1 2
"""

import argparse

import numpy as np

from catfa.model import ModelConfig, build
from catfa.training import TrainConfig, make_synth_dataset, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=2e-3)
    args = ap.parse_args()

    scores = {"zeros": [], "circular": []}
    for seed in args.seeds:
        data = make_synth_dataset(200, 64, seed=seed, task="quadrant")
        for padding in scores:
            model = build(ModelConfig.variant("tiny", dfcn_padding=padding), seed=seed)
            history = train(model, data, TrainConfig(epochs=args.epochs, lr=args.lr, seed=seed))
            scores[padding].append(history[-1].val_dice)
            print(f"seed {seed} {padding:8s} held-out Dice {scores[padding][-1]:.4f}", flush=True)
    for padding, vals in scores.items():
        print(f"{padding:8s} mean {np.mean(vals):.4f}  per seed {', '.join(f'{v:.4f}' for v in vals)}")


if __name__ == "__main__":
    main()
