"""Train a CC layer to imitate bicubic and a rotated Gaussian; dump kernel images.

Usage: python scripts/kernel_imitation.py [out_dir]
"""

import sys

from cconv.cli import main

out = sys.argv[1] if len(sys.argv) > 1 else "runs/imitation"
for oracle, extra in (("bicubic", []), ("gaussian", ["--sigma-x", "0.5", "--sigma-y", "1.0", "--support", "6"])):
    code = main(["imitate", "--oracle", oracle, "--snapshots", "100,500,1000", "--out-dir", f"{out}/{oracle}", *extra])
    if code:
        sys.exit(code)
