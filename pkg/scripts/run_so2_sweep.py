#!/usr/bin/env python3
"""Constraint-precision sweep on the SO(2)-symmetric ring (finite data)."""
import os
import sys

from hamflow.cli import main

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIG = os.path.join(HERE, "..", "configs", "so2_ring.json")

if __name__ == "__main__":
    sys.exit(main(["sweep", CONFIG, "--kappa", "0,0.001",
                   "--data-sizes", "256", "--seeds", "5", *sys.argv[1:]]))
