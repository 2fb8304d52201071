#!/usr/bin/env python3
"""Target vs non-target trace spectra under cloud-rate noise -> two CSVs."""
import sys

from probelab.cli import main

if __name__ == "__main__":
    sys.exit(main(["psd-demo", "--seed", "5", "--noise-rate", "11.5",
                   "--out", "results/psd_demo", *sys.argv[1:]]))
