"""Ranged-scale vs fixed s=1/2 training, each tested on 100 unseen scales.

Usage: python scripts/scale_generalization.py [out_dir]
"""

import json
import sys
from pathlib import Path

from cconv.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/generalization")
runs = {
    "ranged": ["--law", "uniform", "--iters", "3000"],
    "half": ["--law", "fixed", "--fixed-scale", "1/2", "--iters", "1000"],
}
for name, flags in runs.items():
    if main(["generalize", "--out-dir", str(out / name), "--quiet", *flags]):
        sys.exit(1)
    v = json.loads((out / name / "verdict.json").read_text())
    print(f"{name:7s} train={v['train_mse']:.3e} test={v['test_mse']:.3e} ratio={v['ratio']:.3g}")
