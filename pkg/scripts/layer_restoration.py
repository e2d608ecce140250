"""Perplexity on the large-error set as full-precision layers are restored from the top down.

    python3 scripts/layer_restoration.py --work fixture_run --method rtn
"""

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from quanterr.cli import run
from quanterr.io import load_corpus
from quanterr.metrics import build_sets, error_vector
from quanterr.model import nll, resolve
from quanterr.quant import QuantSpec, load_any, quantize_model, restore_layers


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", type=Path, default=Path("fixture_run"))
    ap.add_argument("--method", default="rtn")
    ap.add_argument("--bits", type=int, default=3)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()

    if not (args.work / "model.qwt").exists():
        run(["gen-fixture", "--out", str(args.work), "--seed", str(args.seed)])
    base = resolve(load_any(args.work / "model.qwt"))
    corpus = load_corpus(args.work / "corpus.qcorp")
    calib = load_corpus(args.work / "calib.qcorp")
    q = quantize_model(base, calib, QuantSpec(args.method, args.bits))
    sets = build_sets(error_vector(base, q, corpus), corpus, ctrl_n=10, seed=args.seed)
    docs = [corpus.doc(i) for i in sets.large]

    def ppl(m):
        return math.exp(float(np.mean([nll(m, d) for d in docs])))

    L = base.config.n_layers
    print(f"D_large = {list(sets.large)}")
    print(f"{'restored layers':>16} {'ppl':>10}")
    print(f"{'none':>16} {ppl(q):10.3f}")
    for start in range(L - 1, -1, -1):
        print(f"{f'{start}..{L - 1}':>16} {ppl(restore_layers(q, base, start)):10.3f}")
    print(f"{'base':>16} {ppl(base):10.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
