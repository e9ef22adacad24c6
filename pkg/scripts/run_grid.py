#!/usr/bin/env python3
"""Grid-search eta and beta, then retrain the winner on train+val.

Example:
    python scripts/run_grid.py --etas 0.03,0.1,0.3 --betas 0,1e-3,1e-2 \
        --jobs 4 --out runs/grid
"""
import sys

from wdlab import cli

if __name__ == "__main__":
    sys.exit(cli.main(["grid", *sys.argv[1:]]))
