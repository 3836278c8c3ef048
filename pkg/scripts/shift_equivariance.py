"""Toy strided-conv net vs gradual CC net: shift-back cosine similarity.

Usage: python scripts/shift_equivariance.py [out_dir]   (about 8 min on one core)
"""

import sys

from cconv.cli import main

out = sys.argv[1] if len(sys.argv) > 1 else "runs/equivariance"
sys.exit(main(["equivariance", "--out-dir", out]))
