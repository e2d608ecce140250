"""Generate the seed-42 fixture and run the default study on it.

    python3 scripts/run_fixture_study.py --work fixture_run
"""

import argparse
import sys
from pathlib import Path

from quanterr.cli import run
from quanterr.reports import read_csv


def show(path: Path) -> None:
    t = read_csv(path)
    print(f"\n{path.name}")
    print("  " + "  ".join(f"{h:>12}" for h in t.header))
    for row in t.rows:
        cells = []
        for c in row:
            try:
                cells.append(f"{float(c):12.4f}")
            except ValueError:
                cells.append(f"{c:>12}")
        print("  " + "  ".join(cells))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", type=Path, default=Path("fixture_run"))
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()

    if not (args.work / "study.yaml").exists():
        code = run(["gen-fixture", "--out", str(args.work), "--seed", str(args.seed)])
        if code:
            return code
    code = run(["study", str(args.work / "study.yaml")])
    bundle = args.work / "study"
    for name in ("summary.csv", "correlations.csv", "divergence.csv", "patch.csv", "reversal.csv"):
        if (bundle / name).exists():
            show(bundle / name)
    return code


if __name__ == "__main__":
    sys.exit(main())
