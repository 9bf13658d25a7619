"""
The full desk-scale experiment through the command line interface.

Equivalent shell session:

    phasedoa synth --config configs/desk_scale.json --split train --out runs/desk/train
    phasedoa train --config configs/desk_scale.json --data runs/desk/train --out runs/desk/net.doac
    phasedoa synth --config configs/desk_scale.json --split test --out runs/desk/test
    phasedoa eval  --config configs/desk_scale.json --checkpoint runs/desk/net.doac \\
                   --data runs/desk/test --out runs/desk/accuracy.csv

Expect about 4 minutes of synthesis and 20 minutes of training on one
core. Pass ``--tiny`` to run the same steps on configs/tiny.json in
seconds.

    python demos/04_desk_scale_pipeline.py [--tiny]
"""

import csv
import sys
from pathlib import Path

from phasedoa.cli import main

root = Path(__file__).resolve().parents[1]
tiny = "--tiny" in sys.argv
config = root / "configs" / ("tiny.json" if tiny else "desk_scale.json")
out = root / "runs" / ("tiny" if tiny else "desk")

steps = [
    ["synth", "--config", config, "--split", "train", "--out", out / "train"],
    ["train", "--config", config, "--data", out / "train", "--out", out / "net.doac"],
    ["synth", "--config", config, "--split", "test", "--out", out / "test"],
    ["eval", "--config", config, "--checkpoint", out / "net.doac", "--data", out / "test",
     "--out", out / "accuracy.csv"],
]
for argv in steps:
    code = main([str(a) for a in argv])
    if code:
        sys.exit(code)

print(f"\n{'method':9s} {'SNR':>5s} {'perturbed':>9s} {'accuracy %':>10s}")
for row in csv.DictReader(open(out / "accuracy.csv")):
    print(f"{row['method']:9s} {float(row['snr_db']):5.0f} {row['perturbed']:>9s} {float(row['accuracy_pct']):10.1f}")
