"""Run one of the simulation studies from scripts/configs.

    python3 scripts/run_study.py consistency --out out/consistency
    python3 scripts/run_study.py robustness --reps 100     # quicker smoke run

Set TARGETMED_WORKERS to spread replicates over processes.
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path

from targetmed.cli import main as cli_main

CONFIGS = Path(__file__).parent / "configs"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("study", choices=("consistency", "coverage", "robustness"))
    parser.add_argument("--out", default=None)
    parser.add_argument("--reps", type=int, default=None, help="override the replicate count")
    parser.add_argument("--n-grid", type=int, nargs="+", default=None)
    args = parser.parse_args()

    cfg = json.loads((CONFIGS / f"{args.study}.json").read_text())
    if args.reps is not None:
        cfg["reps"] = args.reps
    if args.n_grid is not None:
        cfg["n_grid"] = args.n_grid
    out = args.out or f"out/{args.study}"
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(cfg, fh)
    return cli_main(["simulate", "--config", fh.name, "--out", out])


if __name__ == "__main__":
    sys.exit(main())
