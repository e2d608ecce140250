"""Multi-method study: quantize once per spec, run the requested analyses, emit a CSV bundle."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, QuantErrError
from .io import TokenCorpus, load_corpus, sha256_file
from .localization import divergence_layer, exit_profile, patch_report, standard_targets
from .metrics import (DocVector, ErrorVector, build_sets, gamma_outlier_ranks, jaccard_top_fraction,
                      kl_vector, layer_kurtosis, layer_mse, magnitude_table, nll_vector, pearson,
                      reversal_report)
from .model import resolve
from .parallel import parallel_map
from .quant import QuantSpec, load_any, quantize_model, restore_layers, restore_projection
from .reports import RunManifest, write_csv

log = logging.getLogger(__name__)

ANALYSES = ("errors", "correlations", "magnitudes", "kurtosis", "reversal", "early-exit",
            "patching", "sets", "scatter", "kl", "mse")
DEFAULT_ANALYSES = ANALYSES[:9]


@dataclass(frozen=True)
class SetOptions:
    top_frac: float = 0.10
    ctrl_frac_pool: float = 0.50
    ctrl_n: int = 10
    dedup_thresh: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    model: Path
    corpus: Path
    specs: tuple[QuantSpec, ...]
    seed: int
    output: Path | None = None
    calibration: Path | None = None
    calib_docs: int = 16
    analyses: tuple[str, ...] = DEFAULT_ANALYSES
    truncation: int = 512
    sets: SetOptions = SetOptions()
    focus: str | None = None
    divergence_threshold: float = 0.05
    kurtosis_tap: str = "r"
    record_timings: bool = False

    def __post_init__(self):
        if not self.specs:
            raise ConfigError("study needs at least one quant spec")
        labels = [s.label for s in self.specs]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"quant spec labels must be unique, got {labels}")
        unknown = set(self.analyses) - set(ANALYSES)
        if unknown:
            raise ConfigError(f"unknown analyses {sorted(unknown)}; expected a subset of {ANALYSES}")
        if self.focus is not None and self.focus not in labels:
            raise ConfigError(f"focus {self.focus!r} is not one of the spec labels {labels}")
        if self.truncation < 1 or self.calib_docs < 1:
            raise ConfigError("truncation and calib_docs must be positive")
        if self.kurtosis_tap not in ("r", "h", "h2"):
            raise ConfigError("kurtosis_tap must be r or h")

    @property
    def focus_label(self) -> str:
        """Spec used for sets, patching and early exit: ``focus`` or the first 3-bit spec."""
        if self.focus:
            return self.focus
        for s in self.specs:
            if s.bits == 3:
                return s.label
        return self.specs[0].label

    def check_paths(self) -> None:
        for p in (self.model, self.corpus, self.calibration):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"path does not exist: {p}")

    def portable_dict(self) -> dict:
        """Everything but file locations; inputs are identified by content digest instead."""
        skip = {"model", "corpus", "calibration", "output", "record_timings"}
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in skip}
        d["specs"] = [s.to_dict() for s in self.specs]
        d["analyses"] = list(self.analyses)
        d["sets"] = {f.name: getattr(self.sets, f.name) for f in fields(SetOptions)}
        d["has_calibration_file"] = self.calibration is not None
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        for key in ("model", "corpus", "specs", "seed"):
            if key not in d:
                raise ConfigError(f"config is missing required key {key!r}")
        base_dir = Path(base_dir or ".")

        def path(v):
            if v is None:
                return None
            p = Path(v)
            return p if p.is_absolute() else base_dir / p

        for key in ("model", "corpus", "calibration", "output"):
            if key in d:
                d[key] = path(d[key])
        if not isinstance(d["specs"], list):
            raise ConfigError("specs must be a list")
        d["specs"] = tuple(QuantSpec.from_dict(s) for s in d["specs"])
        if "analyses" in d:
            d["analyses"] = tuple(d["analyses"])
        if "sets" in d:
            try:
                d["sets"] = SetOptions(**d["sets"])
            except TypeError as e:
                raise ConfigError(f"bad sets section: {e}") from None
        if not isinstance(d["seed"], int):
            raise ConfigError("seed must be an integer")
        return cls(**d)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text("utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return ExperimentConfig.from_dict(raw, path.parent)


def calibration_corpus(cfg: ExperimentConfig, corpus: TokenCorpus) -> TokenCorpus:
    if cfg.calibration is not None:
        return load_corpus(cfg.calibration, cfg.truncation)
    n = min(cfg.calib_docs, len(corpus))
    rng = np.random.default_rng([cfg.seed, 1])
    ids = sorted(corpus.doc_ids[k] for k in rng.choice(len(corpus), size=n, replace=False))
    return corpus.subset(ids)


# ---------------------------------------------------------------- study run

class _Missing(Exception):
    pass


@dataclass
class StudyResult:
    out_dir: Path
    manifest: RunManifest
    artifacts: dict = field(default_factory=dict)

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.manifest.stages.items() if v["status"] == "failed"]


class _Study:
    def __init__(self, cfg: ExperimentConfig, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.base = resolve(load_any(cfg.model))
        self.corpus = load_corpus(cfg.corpus, cfg.truncation)
        self.calib = calibration_corpus(cfg, self.corpus)
        self.inputs = {"model": sha256_file(cfg.model), "corpus": sha256_file(cfg.corpus)}
        if cfg.calibration is not None:
            self.inputs["calibration"] = sha256_file(cfg.calibration)
        blob = json.dumps({"config": cfg.portable_dict(), "inputs": self.inputs}, sort_keys=True, default=str)
        self.config_digest = hashlib.sha256(blob.encode()).hexdigest()
        self.provenance = {"config": self.config_digest[:16], "model": self.inputs["model"][:16],
                           "corpus": self.inputs["corpus"][:16], "tool": __version__}
        self.qmodels: dict = {}
        self.errors: dict[str, ErrorVector] = {}
        self._base_nll: DocVector | None = None
        self._sets = None
        self.artifacts: dict[str, str] = {}

    @property
    def L(self) -> int:
        return self.base.config.n_layers

    def write(self, name, header, rows):
        self.artifacts[name] = write_csv(self.out / name, header, rows, self.provenance)

    # shared intermediates --------------------------------------------------

    def labels(self) -> list[str]:
        return [s.label for s in self.cfg.specs if s.label in self.qmodels]

    def base_nll(self) -> DocVector:
        if self._base_nll is None:
            self._base_nll = nll_vector(self.base, self.corpus)
        return self._base_nll

    def error(self, label) -> ErrorVector:
        if label not in self.qmodels:
            raise _Missing(f"quantized model {label} unavailable")
        if label not in self.errors:
            q = nll_vector(self.qmodels[label], self.corpus)
            self.errors[label] = ErrorVector(self.corpus.doc_ids, q.values - self.base_nll().values,
                                             {"spec": label})
        return self.errors[label]

    def sets(self):
        if self._sets is None:
            o = self.cfg.sets
            self._sets = build_sets(self.error(self.cfg.focus_label), self.corpus, o.ctrl_n, o.top_frac,
                                    o.ctrl_frac_pool, o.dedup_thresh, self.cfg.seed)
        return self._sets

    # stages -----------------------------------------------------------------

    def quantize(self):
        specs = list(self.cfg.specs)

        def one(spec):
            try:
                return quantize_model(self.base, self.calib, spec), None
            except QuantErrError as e:
                return None, f"{type(e).__name__}: {e}"

        failures = []
        for spec, (qm, err) in zip(specs, parallel_map(one, specs)):
            if qm is None:
                failures.append(f"{spec.label}: {err}")
            else:
                self.qmodels[spec.label] = qm
        if failures:
            raise QuantErrError("; ".join(failures))

    def stage_errors(self):
        labels = self.labels()
        vecs = [self.error(l) for l in labels]
        base = self.base_nll()
        rows = [[i, base.values[k]] + [v.values[k] for v in vecs] for k, i in enumerate(self.corpus.doc_ids)]
        self.write("errors.csv", ["doc_id", "base_nll"] + labels, rows)

    def stage_correlations(self):
        labels = self.labels()
        vecs = {l: self.error(l).values for l in labels}
        base = float(self.base_nll().values.mean())
        self.write("summary.csv", ["method", "mean_error", "ppl_base", "ppl_quant"],
                   [[l, float(v.mean()), float(np.exp(base)), float(np.exp(base + v.mean()))]
                    for l, v in vecs.items()])
        self.write("correlations.csv", ["method"] + labels,
                   [[a] + [pearson(vecs[a], vecs[b]) for b in labels] for a in labels])
        frac = self.cfg.sets.top_frac
        self.write("jaccard.csv", ["method"] + labels,
                   [[a] + [jaccard_top_fraction(self.error(a), self.error(b), frac) for b in labels]
                    for a in labels])

    def stage_magnitudes(self):
        labels = self.labels()
        table = magnitude_table(self.base, self.corpus, range(self.L), ("r",))
        rows = []
        for l in range(self.L):
            S = table[("r", l)]
            rows.append([l, float(S.values.mean())] + [pearson(S.values, self.error(x).values) for x in labels])
        self.write("magnitudes.csv", ["layer", "mean_r"] + [f"rho_{x}" for x in labels], rows)

    def stage_kurtosis(self):
        tap = self.cfg.kurtosis_tap
        try:
            sets = self.sets()
        except (_Missing, QuantErrError):
            sets = None
        rows = []
        for l in range(self.L):
            vec, mean = layer_kurtosis(self.base, self.corpus, l, tap)
            row = [l, tap, mean]
            if sets is not None:
                row += [float(vec.subset(sets.large).mean()), float(vec.subset(sets.ctrl).mean())]
            else:
                row += [None, None]
            rows.append(row)
        self.write("kurtosis.csv", ["layer", "tap", "kurtosis_all", "kurtosis_large", "kurtosis_ctrl"], rows)

    def stage_reversal(self):
        sets = self.sets()
        rows = reversal_report(self.base, sets.large, sets.ctrl, self.corpus, range(self.L))
        self.write("reversal.csv", ["layer", "r_large", "r_ctrl", "h_large", "h_ctrl", "flagged"],
                   [[r.layer, r.r_a, r.r_b, r.h_a, r.h_b, r.flagged] for r in rows])
        k = min(2, self.base.config.d_model)
        ranks = gamma_outlier_ranks(self.base, self.corpus, self.L - 1, k)
        self.write("outliers.csv", ["dimension", "mean_abs_r", "gamma_rank", "gamma_abs", "gamma_median"],
                   [[o.dimension, o.mean_abs, o.rank, o.gamma_abs, o.gamma_median] for o in ranks])

    def stage_early_exit(self):
        ids = list(self.sets().large)
        focus = self.cfg.focus_label
        pb = exit_profile(self.base, ids, self.corpus, range(self.L))
        rows = [["base", l, t, v] for l, t, v in pb.rows()]
        div_rows = []
        for label in self.labels():
            pq = exit_profile(self.qmodels[label], ids, self.corpus, range(self.L))
            rows += [[label, l, t, v] for l, t, v in pq.rows()]
            div_rows.append([label, divergence_layer(pb, pq, self.cfg.divergence_threshold)])
        self.write("exit_profile.csv", ["model", "layer", "tap", "nll"], rows)
        self.write("divergence.csv", ["method", "layer"], div_rows)
        log.info("early exit on %d docs, focus %s", len(ids), focus)

    def stage_patching(self):
        ids = list(self.sets().large)
        q = self.qmodels.get(self.cfg.focus_label)
        if q is None:
            raise _Missing(f"focus model {self.cfg.focus_label} unavailable")
        half = self.L // 2
        extra = {"restore_upper_half": restore_layers(q, self.base, half),
                 "restore_down_upper_half": restore_projection(q, self.base, "down", range(half, self.L))}
        table = patch_report(self.base, q, ids, self.corpus, standard_targets(self.L), extra)
        self.write("patch.csv", ["target", "ppl"], [list(r) for r in table.rows])

    def stage_sets(self):
        s = self.sets()
        E = self.error(self.cfg.focus_label).as_dict()
        rows = [["large", i, E[i]] for i in s.large] + [["ctrl", i, E[i]] for i in s.ctrl]
        self.write("sets.csv", ["set", "doc_id", "error"], rows)
        self.write("dedup.csv", ["dropped", "kept", "similarity"], [list(r) for r in s.dedup_log])

    def stage_scatter(self):
        focus = self.cfg.focus_label
        E = self.error(focus)
        try:
            large = set(self.sets().large)
        except (_Missing, QuantErrError):
            large = set()
        base = self.base_nll()
        self.write("scatter.csv", ["doc_id", "base_nll", "error", "in_large"],
                   [[i, b, e, i in large] for i, b, e in zip(self.corpus.doc_ids, base.values, E.values)])

    def stage_kl(self):
        labels = self.labels()
        vecs = [kl_vector(self.base, self.qmodels[l], self.corpus).values for l in labels]
        self.write("kl.csv", ["doc_id"] + labels,
                   [[i] + [v[k] for v in vecs] for k, i in enumerate(self.corpus.doc_ids)])

    def stage_mse(self):
        labels = self.labels()
        docs = self.corpus.docs
        rows = []
        for l in range(self.L):
            rows.append([l] + [float(np.mean([layer_mse(self.base, self.qmodels[x], d, l) for d in docs]))
                               for x in labels])
        self.write("mse.csv", ["layer"] + labels, rows)


STAGES: tuple[tuple[str, str], ...] = (
    ("errors", "stage_errors"), ("correlations", "stage_correlations"), ("magnitudes", "stage_magnitudes"),
    ("kurtosis", "stage_kurtosis"), ("reversal", "stage_reversal"), ("early-exit", "stage_early_exit"),
    ("patching", "stage_patching"), ("sets", "stage_sets"), ("scatter", "stage_scatter"),
    ("kl", "stage_kl"), ("mse", "stage_mse"),
)


def run_study(cfg: ExperimentConfig, out_dir=None, on_stage: Callable[[str, dict], None] | None = None
              ) -> StudyResult:
    """Run every requested analysis; a failing stage is recorded and later stages still run."""
    out = Path(out_dir or cfg.output or "study_out")
    cfg.check_paths()
    out.mkdir(parents=True, exist_ok=True)
    st = _Study(cfg, out)
    stages: dict[str, dict] = {}
    timings: dict[str, float] = {}

    def run(name, fn):
        t0 = time.perf_counter()
        try:
            fn()
            stages[name] = {"status": "ok"}
        except _Missing as e:
            stages[name] = {"status": "skipped", "reason": str(e)}
        except (QuantErrError, ValueError, ArithmeticError, KeyError) as e:
            log.warning("stage %s failed: %s", name, e)
            stages[name] = {"status": "failed", "error": f"{type(e).__name__}: {e}"}
        timings[name] = round(time.perf_counter() - t0, 3)
        if on_stage:
            on_stage(name, stages[name])

    run("quantize", st.quantize)
    for name, method in STAGES:
        if name in cfg.analyses:
            run(name, getattr(st, method))

    manifest = RunManifest(config_digest=st.config_digest, tool_version=__version__, inputs=st.inputs,
                           artifacts=dict(sorted(st.artifacts.items())), stages=stages,
                           timings=timings if cfg.record_timings else None, config=cfg.portable_dict())
    manifest.write(out)
    return StudyResult(out, manifest, st.artifacts)
