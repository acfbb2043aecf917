#!/usr/bin/env python3
"""Run the scaling-sweep experiment with its bundled config."""
import sys
from pathlib import Path

from secureftl.cli import main

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "scaling_sweep.cfg"

if __name__ == "__main__":
    sys.exit(main(["--config", str(CONFIG), *sys.argv[1:]]))
