"""Print the projected grids of the worked examples (s=1/2, s=1/3, 0.6 x 1.4)."""

import sys

from cconv.cli import main

cases = [
    ["--in-size", "8", "--scale", "1/2"],
    ["--in-size", "9", "--scale", "1/3"],
    ["--in-size", "4", "--scale", "0.6,1.4", "--support", "2"],
]
for i, case in enumerate(cases):
    print(f"# grid {' '.join(case)}")
    if main(["grid", "--out-dir", f"runs/grid/{i}", "--quiet", *case]):
        sys.exit(1)
