"""Command-line entry point: ``quanterr <verb> ...``.

Exit codes: 0 success, 2 config error, 3 data-format error, 4 numeric failure.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, DataFormatError, QuantErrError
from .fixture import (DEFAULT_CONFIG, STUDY_PLAN, STUDY_SUBLAYER_SCALE, STUDY_TIE, gen_corpus,
                      gen_fixture, sample_corpus)
from .io import TokenCorpus, atomic_write_bytes, load_corpus, save_corpus, save_weights
from .localization import PATCH_TAPS, PatchTarget, exit_profile, patch_report, standard_targets
from .metrics import ErrorVector, build_sets
from .model import ModelConfig, nll, resolve
from .quant import QuantSpec, load_any, quantize_model, restore_projection, save_quantized
from .reports import diff_bundles, read_csv, write_csv
from .study import load_config, run_study

log = logging.getLogger("quanterr")


def _ids(spec: str | None, corpus: TokenCorpus) -> list[int]:
    if not spec:
        return list(corpus.doc_ids)
    try:
        ids = [int(x) for x in spec.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"doc ids must be comma-separated integers, got {spec!r}") from None
    for i in ids:
        corpus.doc(i)
    return ids


def _layers(spec: str | None, n_layers: int) -> list[int]:
    if spec is None or spec == "all":
        return list(range(n_layers))
    if spec == "upper":
        return list(range(n_layers // 2, n_layers))
    out: list[int] = []
    for part in spec.split(","):
        a, _, b = part.partition("-")
        try:
            out.extend(range(int(a), int(b) + 1) if b else [int(a)])
        except ValueError:
            raise ConfigError(f"bad layer list {spec!r}") from None
    return out


def _ids_from_file(path: str) -> list[int]:
    t = read_csv(path)
    if "doc_id" not in t.header:
        raise DataFormatError(f"{path}: no doc_id column")
    k = t.header.index("doc_id")
    return [int(r[k]) for r in t.rows]


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("gen-fixture")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=42, show_default=True)
@click.option("--layers", "n_layers", default=DEFAULT_CONFIG.n_layers, show_default=True)
@click.option("--d-model", default=DEFAULT_CONFIG.d_model, show_default=True)
@click.option("--heads", default=DEFAULT_CONFIG.n_heads, show_default=True)
@click.option("--d-ff", default=DEFAULT_CONFIG.d_ff, show_default=True)
@click.option("--vocab", default=DEFAULT_CONFIG.vocab_size, show_default=True)
@click.option("--n-docs", default=100, show_default=True)
@click.option("--doc-len", default=64, show_default=True)
@click.option("--calib-docs", default=16, show_default=True)
@click.option("--outliers/--no-outliers", default=True, show_default=True)
@click.option("--corpus-source", type=click.Choice(["sampled", "uniform"]), default="sampled", show_default=True,
              help="Sample documents from the model, or draw uniform-random ids.")
@click.option("--low-entropy-frac", default=0.3, show_default=True)
def gen_fixture_cmd(out_dir, seed, n_layers, d_model, heads, d_ff, vocab, n_docs, doc_len, calib_docs,
                    outliers, corpus_source, low_entropy_frac):
    """Write model.qwt, corpus.qcorp, calib.qcorp and a ready-to-run study.yaml."""
    cfg = ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=heads, d_ff=d_ff, vocab_size=vocab,
                      max_seq=max(DEFAULT_CONFIG.max_seq, doc_len + 1))
    model = gen_fixture(cfg, seed, STUDY_PLAN if outliers else None, tie=STUDY_TIE,
                        sublayer_scale=STUDY_SUBLAYER_SCALE)
    if corpus_source == "sampled":
        corpus = sample_corpus(model, n_docs, doc_len, seed, low_entropy_frac)
        calib = sample_corpus(model, calib_docs, doc_len, seed + 1000, 0.0, first_id=n_docs)
    else:
        corpus = gen_corpus(vocab, n_docs, doc_len, seed, low_entropy_frac)
        calib = gen_corpus(vocab, calib_docs, doc_len, seed + 1000, 0.0, first_id=n_docs)
    out = Path(out_dir)
    save_weights(model, out / "model.qwt")
    save_corpus(corpus, out / "corpus.qcorp")
    save_corpus(calib, out / "calib.qcorp")
    study = {"model": "model.qwt", "corpus": "corpus.qcorp", "calibration": "calib.qcorp", "seed": seed,
             "output": "study", "specs": [{"method": "rtn", "bits": 3}, {"method": "rtn", "bits": 4},
                                          {"method": "nf", "bits": 3}, {"method": "gptq", "bits": 3},
                                          {"method": "awq", "bits": 3}]}
    atomic_write_bytes(out / "study.yaml", yaml.safe_dump(study, sort_keys=False).encode())
    click.echo(f"wrote fixture to {out} (model {model.digest[:12]})")


@main.command("gen-corpus")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--vocab", default=256, show_default=True)
@click.option("--n-docs", default=100, show_default=True)
@click.option("--doc-len", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--low-entropy-frac", default=0.3, show_default=True)
@click.option("--first-id", default=0, show_default=True)
@click.option("--model", "model_path", type=click.Path(exists=True), default=None,
              help="Sample documents from this model instead of uniform ids.")
def gen_corpus_cmd(out, vocab, n_docs, doc_len, seed, low_entropy_frac, first_id, model_path):
    """Write a seeded QCORP corpus."""
    if model_path:
        corpus = sample_corpus(resolve(load_any(model_path)), n_docs, doc_len, seed, low_entropy_frac,
                               first_id=first_id)
    else:
        corpus = gen_corpus(vocab, n_docs, doc_len, seed, low_entropy_frac, first_id=first_id)
    save_corpus(corpus, out)
    click.echo(f"wrote {len(corpus)} docs to {out}")


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--calib", required=True, type=click.Path(exists=True))
@click.option("--method", type=click.Choice(["rtn", "nf", "gptq", "awq"]), required=True)
@click.option("--bits", type=int, default=3, show_default=True)
@click.option("--group", "--group-size", "group_size", type=int, default=None,
              help="Group size (default 64 for 3-bit, 128 for 4-bit).")
@click.option("--damp", type=float, default=0.01, show_default=True)
@click.option("--sort/--no-sort", "act_order", default=True, show_default=True,
              help="GPTQ activation sorting.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def quantize(model_path, calib, method, bits, group_size, damp, act_order, out):
    """Quantize a model into a directory (model.qwt + manifest.json)."""
    spec = QuantSpec(method, bits, group_size, gptq_damp=damp, gptq_act_sort=act_order)
    qm = quantize_model(resolve(load_any(model_path)), load_corpus(calib), spec)
    save_quantized(qm, out)
    click.echo(f"wrote {spec.label} to {out}")


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--base", "base_path", type=click.Path(exists=True), default=None,
              help="Full-precision model; adds a per-document error column.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def eval_cmd(model_path, corpus, base_path, out):
    """Per-document NLL (and quantization error) as CSV."""
    m = load_any(model_path)
    c = load_corpus(corpus)
    vals = [nll(m, d) for _, d in c]
    if base_path:
        b = load_any(base_path)
        base = [nll(b, d) for _, d in c]
        rows = [[i, v, v - bb] for i, v, bb in zip(c.doc_ids, vals, base)]
        write_csv(out, ["doc_id", "nll", "error"], rows)
    else:
        write_csv(out, ["doc_id", "nll"], list(zip(c.doc_ids, vals)))
    click.echo(f"mean nll {float(np.mean(vals)):.6f} ppl {float(np.exp(np.mean(vals))):.4f}")


@main.command()
@click.argument("config", type=click.Path())
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Override the config's output dir.")
def study(config, out):
    """Run a multi-method study described by a YAML config."""
    cfg = load_config(config)
    res = run_study(cfg, out, on_stage=lambda name, st: click.echo(f"{name}: {st['status']}"))
    click.echo(f"bundle written to {res.out_dir}")
    if res.failed:
        click.get_current_context().exit(4)


@main.command("early-exit")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--docs", default=None, help="Comma-separated doc ids (default: all).")
@click.option("--doc-file", type=click.Path(exists=True), default=None, help="CSV with a doc_id column.")
@click.option("--layers", default="all", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def early_exit(model_path, corpus, docs, doc_file, layers, out):
    """Exit profile (layer,tap,nll) decoded from r and z."""
    m = load_any(model_path)
    c = load_corpus(corpus)
    ids = _ids_from_file(doc_file) if doc_file else _ids(docs, c)
    prof = exit_profile(m, ids, c, _layers(layers, resolve(m).config.n_layers))
    write_csv(out, ["layer", "tap", "nll"], prof.rows())


@main.command()
@click.option("--base", "base_path", required=True, type=click.Path(exists=True))
@click.option("--qmodel", "q_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--docs", default=None)
@click.option("--doc-file", type=click.Path(exists=True), default=None)
@click.option("--tap", "taps", multiple=True, type=click.Choice(PATCH_TAPS),
              help="Patch this tap (repeatable). Default: the standard upper-half targets.")
@click.option("--layers", default="upper", show_default=True)
@click.option("--include-up-input", is_flag=True, help="With gate_in, also restore W_up's input.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def patch(base_path, q_path, corpus, docs, doc_file, taps, layers, include_up_input, out):
    """Perplexity table (target,ppl) for activation patches."""
    base, q = load_any(base_path), load_any(q_path)
    c = load_corpus(corpus)
    ids = _ids_from_file(doc_file) if doc_file else _ids(docs, c)
    L = resolve(q).config.n_layers
    if taps:
        targets = [PatchTarget(tuple(taps), tuple(_layers(layers, L)), include_up_input=include_up_input)]
    else:
        targets = standard_targets(L)
    table = patch_report(base, q, ids, c, targets)
    write_csv(out, ["target", "ppl"], [list(r) for r in table.rows])


@main.command()
@click.option("--base", "base_path", required=True, type=click.Path(exists=True))
@click.option("--qmodel", "q_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--projection", "projections", multiple=True, required=True,
              type=click.Choice(["q", "k", "v", "o", "gate", "up", "down"]))
@click.option("--layers", default="upper", show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def restore(base_path, q_path, projections, layers, out):
    """Put projections back to full precision and save the result."""
    q = load_any(q_path)
    restored = restore_projection(q, load_any(base_path), projections, _layers(layers, q.config.n_layers))
    save_quantized(restored, out)


@main.command("make-sets")
@click.option("--errors", "errors_csv", required=True, type=click.Path(exists=True))
@click.option("--column", default="error", show_default=True, help="Error column in the CSV.")
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--ctrl-n", default=10, show_default=True)
@click.option("--top-frac", default=0.10, show_default=True)
@click.option("--dedup-thresh", default=0.1, show_default=True)
@click.option("--seed", required=True, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def make_sets(errors_csv, column, corpus, ctrl_n, top_frac, dedup_thresh, seed, out):
    """Large-error and control document sets from an error CSV."""
    t = read_csv(errors_csv)
    if "doc_id" not in t.header or column not in t.header:
        raise DataFormatError(f"{errors_csv}: needs doc_id and {column} columns")
    ki, kv = t.header.index("doc_id"), t.header.index(column)
    E = ErrorVector(tuple(int(r[ki]) for r in t.rows), np.array([float(r[kv]) for r in t.rows]))
    s = build_sets(E, load_corpus(corpus), ctrl_n, top_frac, 0.5, dedup_thresh, seed)
    for w in s.warnings:
        click.echo(f"warning: {w}", err=True)
    write_csv(out, ["set", "doc_id"], [["large", i] for i in s.large] + [["ctrl", i] for i in s.ctrl])


@main.command()
@click.argument("report_a", type=click.Path(exists=True, file_okay=False))
@click.argument("report_b", type=click.Path(exists=True, file_okay=False))
@click.option("--tol", default=0.0, show_default=True)
def diff(report_a, report_b, tol):
    """Compare the CSV artifacts of two report bundles; exit 1 if they differ."""
    lines = diff_bundles(report_a, report_b, tol)
    for line in lines:
        click.echo(line)
    if lines:
        click.get_current_context().exit(1)


def run(argv=None) -> int:
    try:
        rv = main.main(args=argv, standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return 2
    except click.exceptions.Abort:
        return 1
    except QuantErrError as e:
        click.echo(f"error: {e}", err=True)
        return e.exit_code
    except FileNotFoundError as e:
        click.echo(f"error: {e}", err=True)
        return ConfigError.exit_code
    return rv if isinstance(rv, int) else 0


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
