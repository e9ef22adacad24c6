#!/usr/bin/env python3
"""Run one training configuration.

Examples:
    python scripts/run_training.py --seed 3 --out runs/demo
    python scripts/run_training.py --config configs/sgd_wd.ini \
        --set coupling.beta=1e-3 --set run.epochs=10
"""
import sys

from wdlab import cli

if __name__ == "__main__":
    sys.exit(cli.main(["train", *sys.argv[1:]]))
