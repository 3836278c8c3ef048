"""Repeated even 4x4 Gaussian conv vs a CC layer at scale 1, plus a 3x3 control.

Usage: python scripts/misalignment.py [out_dir]
"""

import sys

from cconv.cli import main

out = sys.argv[1] if len(sys.argv) > 1 else "runs/misalignment"
sys.exit(
    main(["misalign", "--out-dir", f"{out}/even4"])
    or main(["misalign", "--filter-size", "3", "--out-dir", f"{out}/odd3"])
)
