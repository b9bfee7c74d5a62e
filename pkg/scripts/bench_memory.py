"""Peak live bytes of the three gradient schedules, plus head-stage scaling with tile count.

    python scripts/bench_memory.py --heights 256 512 --out memory.csv
"""
import argparse
from dataclasses import replace

import numpy as np

from panosplat import deferred


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--heights", type=int, nargs="+", default=[128, 256, 512])
    ap.add_argument("--hidden", type=int, default=8)
    ap.add_argument("--max-tiles", type=int, default=4)
    ap.add_argument("--out", default=None)
    a = ap.parse_args()

    specs = {f"H={h}": deferred.bench_spec(h, hidden=a.hidden) for h in a.heights}
    rows = deferred.memory_report(specs)
    text = deferred.report_csv(rows)
    print(text, end="")
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(text)

    spec = specs[f"H={a.heights[-1]}"]
    inputs = deferred.random_inputs(spec, 0)
    theta = deferred.init_theta(spec, 0)
    ns = np.arange(1, a.max_tiles + 1)
    peaks = np.array([deferred.head_stage_peak(replace(spec, tiles=int(n)), inputs, theta) for n in ns], float)
    design = np.stack([np.ones_like(peaks), 1.0 / ns**2], axis=1)
    (c, b), *_ = np.linalg.lstsq(design, peaks, rcond=None)
    print(f"\nhead stage at H={a.heights[-1]}: peak ~ {c / 2**20:.2f} MiB + {b / 2**20:.2f} MiB / N^2")
    for n, p, fit in zip(ns, peaks, design @ (c, b)):
        print(f"  N={n}: {p / 2**20:8.2f} MiB (fit {fit / 2**20:8.2f})")


if __name__ == "__main__":
    main()
