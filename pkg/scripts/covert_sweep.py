#!/usr/bin/env python3
"""Detection-rate sweep of the three monitoring strategies -> CSV."""
import sys

from probelab.cli import main

if __name__ == "__main__":
    sys.exit(main(["covert-sweep", "--config", "configs/covert_sweep.toml", *sys.argv[1:]]))
