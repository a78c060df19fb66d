"""Run every JSON config in scripts/configs through the CLI into runs/<name>/."""

import argparse
import json
import sys
from pathlib import Path

from snakelab.cli import main

HERE = Path(__file__).resolve().parent


def run_all(out_root: Path, only: list[str]) -> int:
    worst = 0
    for path in sorted((HERE / "configs").glob("*.json")):
        if only and path.stem not in only:
            continue
        experiment = json.loads(path.read_text())["experiment"]
        print(f"[{path.stem}] {experiment}", flush=True)
        worst = max(worst, main([experiment, "--config", str(path), "--out", str(out_root / path.stem)]))
    return worst


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs", type=Path)
    ap.add_argument("names", nargs="*", help="config stems to run (default: all)")
    args = ap.parse_args()
    sys.exit(run_all(args.out, args.names))
