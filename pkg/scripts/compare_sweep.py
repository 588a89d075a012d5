"""VQ vs DL quantization error at equal MAC budgets over many seeded structured layers.

    python scripts/compare_sweep.py --trials 25 --alphas 8,10,12,20 [--strategy max-k]
"""
import argparse

import numpy as np

from pqaccel.accel import solve_budget
from pqaccel.quantizer import quantization_error, quantize_layer
from pqaccel.synthetic import structured_layer

INPUT_HW = (8, 8)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--trials", type=int, default=25)
    parser.add_argument("--alphas", default="8,10,12,20")
    parser.add_argument("--rank", type=int, default=4)
    parser.add_argument("--noise", type=float, default=0.05)
    parser.add_argument("--strategy", default="balanced", choices=("balanced", "max-k"))
    args = parser.parse_args(argv)
    print(f"{'alpha':>6}{'DL wins':>9}{'mean VQ err':>13}{'mean DL err':>13}")
    for alpha in (float(a) for a in args.alphas.split(",")):
        wins, ev, ed = 0, [], []
        for seed in range(args.trials):
            layer = structured_layer(rank=args.rank, noise=args.noise, seed=seed)
            d = layer.channels
            vq = quantize_layer(layer, solve_budget(alpha, layer, INPUT_HW, d, "vq", seed=seed).scheme)
            dl = quantize_layer(layer, solve_budget(alpha, layer, INPUT_HW, d, "dl", seed=seed,
                                                    strategy=args.strategy).scheme)
            ev.append(quantization_error(layer, vq))
            ed.append(quantization_error(layer, dl))
            wins += ed[-1] <= ev[-1]
        print(f"{alpha:>6.1f}{wins:>5}/{args.trials:<3}{np.mean(ev):>13.4f}{np.mean(ed):>13.4f}")


if __name__ == "__main__":
    main()
