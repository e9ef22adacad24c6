#!/usr/bin/env python3
"""Run the randomized oracle checks (exit status 1 if any fails).

Example:
    python scripts/check_oracles.py --trials 200 --json reports/oracles.json
"""
import sys

from wdlab import cli

if __name__ == "__main__":
    sys.exit(cli.main(["verify", *sys.argv[1:]]))
