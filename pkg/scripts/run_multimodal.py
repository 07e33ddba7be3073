#!/usr/bin/env python3
"""Train the multimodal (4-mode mixture) model and export all figures' data."""
import os
import sys

from hamflow.cli import main

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIG = os.path.join(HERE, "..", "configs", "multimodal.json")

if __name__ == "__main__":
    rc = main(["train", CONFIG, *sys.argv[1:]])
    if rc == 0:
        out = os.environ.get("HAMFLOW_OUT", os.getcwd())
        rc = main(["eval", os.path.join(out, "runs/multimodal"),
                   "--grid", "--samples", "10000", "--trajectories", "64"])
    sys.exit(rc)
