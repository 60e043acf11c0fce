#!/usr/bin/env python3
"""Run check, init, solve, verify and export for one config; stop at the first nonzero stage."""

import argparse
import subprocess
import sys

STAGES = ("check", "init", "solve", "verify", "export")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config")
    ap.add_argument("--force", action="store_true", help="pass --force to init")
    ap.add_argument("--skip-envelope", action="store_true", help="pass --skip-envelope to init")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    for stage in STAGES:
        cmd = [sys.executable, "-m", "gpje.cli", stage, "--config", args.config]
        if args.seed is not None:
            cmd += ["--seed", str(args.seed)]
        if stage == "init":
            cmd += ["--force"] * args.force + ["--skip-envelope"] * args.skip_envelope
        code = subprocess.call(cmd)
        if code and not (stage == "check" and args.force):
            print(f"stopped at {stage} (exit {code})", file=sys.stderr)
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
