"""Runtime / tracked-memory tables for the three execution modes.

Usage: python scripts/benchmark.py [out_dir] [--quick]
"""

import sys

from cconv.cli import main

args = [a for a in sys.argv[1:] if not a.startswith("--")]
out = args[0] if args else "runs/bench"
flags = ["--sizes", "32,64", "--layers", "1,2", "--repeats", "3"] if "--quick" in sys.argv else []
sys.exit(main(["bench", "--out-dir", out, *flags]))
