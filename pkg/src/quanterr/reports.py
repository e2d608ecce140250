"""CSV artifacts, run manifests and tolerance-aware bundle diffs."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataFormatError
from .io import atomic_write_bytes

MANIFEST_NAME = "manifest.json"


def fmt(value) -> str:
    # repr is the shortest string that round-trips, so it is stable across runs
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(float(value))
    if value is None:
        return ""
    if hasattr(value, "item"):
        return fmt(value.item())
    return str(value)


def csv_bytes(header: Sequence[str], rows: Iterable[Sequence], provenance: Mapping | None = None) -> bytes:
    lines = []
    if provenance:
        lines.append("# provenance " + " ".join(f"{k}={provenance[k]}" for k in sorted(provenance)))
    lines.append(",".join(header))
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
        lines.append(",".join(fmt(v) for v in row))
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_csv(path, header, rows, provenance: Mapping | None = None) -> str:
    """Write atomically and return the file's sha256."""
    data = csv_bytes(header, rows, provenance)
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class CsvTable:
    provenance: dict
    header: list[str]
    rows: list[list[str]]


def read_csv(path) -> CsvTable:
    prov: dict = {}
    header = None
    rows = []
    for line in Path(path).read_text("utf-8").splitlines():
        if line.startswith("#"):
            if line.startswith("# provenance "):
                for kv in line[len("# provenance "):].split():
                    k, _, v = kv.partition("=")
                    prov[k] = v
            continue
        cells = line.split(",")
        if header is None:
            header = cells
        else:
            rows.append(cells)
    if header is None:
        raise DataFormatError(f"{path}: no header row")
    return CsvTable(prov, header, rows)


@dataclass
class RunManifest:
    config_digest: str
    tool_version: str
    inputs: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    timings: dict | None = None
    config: dict = field(default_factory=dict)

    def to_json(self) -> bytes:
        d = {"config_digest": self.config_digest, "tool_version": self.tool_version,
             "inputs": self.inputs, "artifacts": self.artifacts, "stages": self.stages,
             "config": self.config}
        if self.timings is not None:
            d["timings"] = self.timings
        return (json.dumps(d, indent=2, sort_keys=True) + "\n").encode("utf-8")

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        atomic_write_bytes(path, self.to_json())
        return path


def load_manifest(out_dir) -> dict:
    path = Path(out_dir) / MANIFEST_NAME
    try:
        return json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        raise DataFormatError(f"{out_dir}: no {MANIFEST_NAME}") from None


# ---------------------------------------------------------------- diff

def _as_float(cell: str):
    try:
        return float(cell)
    except ValueError:
        return None


def _cells_close(a: str, b: str, tol: float) -> bool:
    if a == b:
        return True
    x, y = _as_float(a), _as_float(b)
    if x is None or y is None:
        return False
    if math.isnan(x) and math.isnan(y):
        return True
    return abs(x - y) <= tol


def diff_tables(name: str, a: CsvTable, b: CsvTable, tol: float) -> list[str]:
    if a.header != b.header:
        return [f"{name}: header {a.header} != {b.header}"]
    out = []
    if len(a.rows) != len(b.rows):
        out.append(f"{name}: {len(a.rows)} rows != {len(b.rows)} rows")
    for i, (ra, rb) in enumerate(zip(a.rows, b.rows)):
        if len(ra) != len(rb):
            out.append(f"{name}:{i + 1}: row width {len(ra)} != {len(rb)}")
            continue
        for col, x, y in zip(a.header, ra, rb):
            if not _cells_close(x, y, tol):
                out.append(f"{name}:{i + 1}:{col}: {x} != {y}")
    return out


def diff_bundles(dir_a, dir_b, tol: float = 0.0) -> list[str]:
    """Differences between the CSV artifacts of two report bundles.

    The manifest is skipped (it carries digests and optional timings) and so
    are '#' comment lines; cells compare exactly as text or numerically
    within ``tol``.
    """
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    for d in (dir_a, dir_b):
        if not d.is_dir():
            raise DataFormatError(f"{d}: not a report bundle directory")
    names_a = {p.name for p in dir_a.glob("*.csv")}
    names_b = {p.name for p in dir_b.glob("*.csv")}
    out = [f"only in {dir_a}: {n}" for n in sorted(names_a - names_b)]
    out += [f"only in {dir_b}: {n}" for n in sorted(names_b - names_a)]
    for n in sorted(names_a & names_b):
        pa, pb = dir_a / n, dir_b / n
        if pa.read_bytes() == pb.read_bytes():
            continue
        out.extend(diff_tables(n, read_csv(pa), read_csv(pb), tol))
    return out
