"""Error correlation between GPTQ damping/sorting variants and RTN on the fixture.

    python3 scripts/gptq_variants.py --work fixture_run
"""

import argparse
import itertools
import sys
from pathlib import Path

from quanterr.cli import run
from quanterr.quant import QuantSpec
from quanterr.reports import read_csv
from quanterr.study import ExperimentConfig, load_config, run_study

DAMPING = (0.005, 0.01, 0.02)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", type=Path, default=Path("fixture_run"))
    ap.add_argument("--bits", type=int, default=3)
    args = ap.parse_args()

    if not (args.work / "study.yaml").exists():
        run(["gen-fixture", "--out", str(args.work)])
    base = load_config(args.work / "study.yaml")
    specs = [QuantSpec("rtn", args.bits)]
    for damp, sort in itertools.product(DAMPING, (True, False)):
        name = f"gptq_d{damp}_{'sort' if sort else 'nosort'}"
        specs.append(QuantSpec("gptq", args.bits, gptq_damp=damp, gptq_act_sort=sort, name=name))
    cfg = ExperimentConfig(model=base.model, corpus=base.corpus, calibration=base.calibration, seed=base.seed,
                           specs=tuple(specs), analyses=("errors", "correlations"))
    out = args.work / "gptq_variants"
    res = run_study(cfg, out)
    if res.failed:
        print("failed stages:", res.failed)
        return 4

    summary = {r[0]: float(r[1]) for r in read_csv(out / "summary.csv").rows}
    corr = read_csv(out / "correlations.csv")
    labels = corr.header[1:]
    rtn = labels[0]
    print(f"{'spec':>24} {'mean error':>11} {'rho vs ' + rtn:>11}")
    for row in corr.rows:
        print(f"{row[0]:>24} {summary[row[0]]:11.5f} {float(row[1]):11.4f}")
    others = [float(c) for i, row in enumerate(corr.rows) for j, c in enumerate(row[1:]) if j > i]
    print(f"\nmean pairwise correlation over {len(others)} pairs: {sum(others) / len(others):.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
