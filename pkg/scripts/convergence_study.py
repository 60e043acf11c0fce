#!/usr/bin/env python3
"""Grid refinement of the manufactured reflector: max |Tu - Tu_ex| and observed rates."""

import argparse
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from gpje.config import RunConfig
from gpje.pipeline import run_init, run_solve

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "manufactured_reflection.toml"))
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64])
    ap.add_argument("--json", help="write the table here")
    args = ap.parse_args()
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        for n in args.sizes:
            cfg = RunConfig.load(args.config)
            cfg.grid.n_r = cfg.grid.n_theta = n
            cfg.output_dir = str(Path(tmp) / f"n{n}")
            run_init(cfg, force=True)
            _, rep = run_solve(cfg)
            err = rep["manufactured"]["Tu_error"]
            rate = np.log2(rows[-1]["Tu_error"] / err) if rows else float("nan")
            rows.append({"n": n, "Tu_error": err, "rate": rate})
            print(f"n={n:4d}  max|Tu - Tu_ex| = {err:.3e}  observed order {rate:.2f}")
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
