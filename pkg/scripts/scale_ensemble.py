"""Ensembles over random scale chains vs single chains on a small CC regressor.

Usage: python scripts/scale_ensemble.py [out_dir]
"""

import sys

from cconv.cli import main

out = sys.argv[1] if len(sys.argv) > 1 else "runs/ensemble"
sys.exit(main(["ensemble", "--n-members", "5", "--out-dir", out]))
