#!/usr/bin/env python3
"""End-to-end nonce extraction on the simulated machine -> JSON report."""
import sys

from probelab.cli import main

if __name__ == "__main__":
    sys.exit(main(["end-to-end", "--config", "configs/end_to_end.toml", *sys.argv[1:]]))
