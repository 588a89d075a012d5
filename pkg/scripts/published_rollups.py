"""Whole-model MAC reductions from feature-part shares and part reductions.

Writes opaque two-part models for both detectors, runs ``pqaccel report`` on
each and compares the total reduction with the published figure.

    python scripts/published_rollups.py [--out DIR]
"""
import argparse
import json
import subprocess
import sys
import tempfile
from pathlib import Path

from pqaccel.model_io import save_model
from pqaccel.synthetic import rollup_model

# (detector, total MACs, feature share, [(part reduction %, published total reduction %)])
DETECTORS = [
    ("squeezedet", 5.3e9, 0.83, [(72, 59), (74, 60), (75, 62), (78, 65)]),
    ("resnetdet", 3.5e10, 0.81, [(84, 67), (86, 69), (88, 71), (92, 74)]),
]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=None, help="keep fixture models here")
    args = parser.parse_args(argv)
    root = Path(args.out or tempfile.mkdtemp(prefix="rollups-"))
    print(f"{'model':<12}{'part %':>8}{'total %':>10}{'published':>11}{'diff pp':>9}")
    worst = 0.0
    for name, total, share, rows in DETECTORS:
        for part, published in rows:
            path = save_model(rollup_model(name, total, share, part), root / f"{name}-{part}")
            out = subprocess.run([sys.executable, "-m", "pqaccel.cli", "report", "--model", str(path),
                                  "--groups", "feature-extraction", "--json"],
                                 check=True, capture_output=True, text=True).stdout
            got = json.loads(out)["total"]["reduction_pct"]
            worst = max(worst, abs(got - published))
            print(f"{name:<12}{part:>8}{got:>10.2f}{published:>11}{got - published:>9.2f}")
    print(f"largest deviation: {worst:.2f} pp")


if __name__ == "__main__":
    main()
