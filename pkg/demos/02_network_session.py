"""A compressed run of the three-link network with default parameters.

Each represented second simulates 1/5 of its pulses; blocks are scaled
down by the same factor, so finite-size penalties weigh more than in a
real six-hour run. Artifacts land in ``demo_out/``.
"""
import sys
from pathlib import Path

from wdmqkd.cli import main

config = Path(__file__).parents[1] / "configs" / "default_network.json"
sys.exit(main([
    "run", str(config), "--duration", "1800", "--time-compress", "5", "--scale-block",
    "--seed", "1", "--out", "demo_out",
]))
