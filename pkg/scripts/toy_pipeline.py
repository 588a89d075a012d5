"""Paired toy-pipeline runs: progressive DL acceleration with and without fine-tuning.

    python scripts/toy_pipeline.py --seeds 10 --alpha 8 --steps 200
"""
import argparse
import time

from pqaccel.pipeline import (FinetuneConfig, Stage, StageSchedule, make_box_dataset,
                              progressive_accelerate, toy_hooks, train_toy_model)


def paired_run(seed, alpha=8.0, steps=200, lr=0.01, scheme="dl"):
    train = make_box_dataset(512, seed + 100)
    val = make_box_dataset(256, seed + 200)
    model = train_toy_model(seed, steps=600, train=train)
    schedule = StageSchedule([Stage([n], scheme, alpha=alpha) for n in ("f1", "f2", "f3")],
                             FinetuneConfig(steps=steps, lr=lr), seed=seed)
    finetune, evaluate = toy_hooks(train, val, schedule.finetune, seed)
    tuned = progressive_accelerate(model, schedule, finetune, evaluate)
    plain = progressive_accelerate(model, schedule, None, evaluate)
    return tuned, plain


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, default=10)
    parser.add_argument("--alpha", type=float, default=8.0)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--lr", type=float, default=0.01)
    parser.add_argument("--scheme", default="dl", choices=("vq", "dl"))
    args = parser.parse_args(argv)
    start, wins = time.time(), 0
    print(f"{'seed':>4}{'original':>10}{'fine-tuned':>12}{'plain':>8}")
    for seed in range(args.seeds):
        tuned, plain = paired_run(seed, args.alpha, args.steps, args.lr, args.scheme)
        a, b = tuned[-1].metrics["accuracy"], plain[-1].metrics["accuracy"]
        wins += a >= b
        print(f"{seed:>4}{tuned[0].metrics['accuracy']:>10.4f}{a:>12.4f}{b:>8.4f}")
    print(f"fine-tuned >= plain in {wins}/{args.seeds} seeds ({time.time() - start:.0f} s)")


if __name__ == "__main__":
    main()
