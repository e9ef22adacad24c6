#!/usr/bin/env python3
"""Run the three weight-decay mechanism bundles and write summaries.

Examples:
    python scripts/replicate_mechanisms.py --out runs/replication
    python scripts/replicate_mechanisms.py --only m2 --no-plots
"""
import sys

from wdlab import cli

if __name__ == "__main__":
    sys.exit(cli.main(["replicate", *sys.argv[1:]]))
