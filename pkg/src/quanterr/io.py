"""QWT tensor files and QCORP token corpora.

QWT layout: ``b"QWT1"``, u32 header length, UTF-8 JSON header, raw tensor
bytes. The header is ``{"meta": {...}, "tensors": {name: {"dtype", "shape",
"offset"}}}`` with offsets relative to the start of the data section. Model
weights are always ``f32``; quantized payloads additionally use ``u32`` codes
and ``f64`` grid parameters.

QCORP layout (all little-endian u32): ``b"QCR1"``, version, vocab_size,
doc count, then per document doc_id, length, tokens.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import DataFormatError, MagicError, ShapeError, TruncatedError, UnknownDocError
from .model import NORMS, PROJECTIONS, LayerWeights, ModelConfig, ModelWeights

QWT_MAGIC = b"QWT1"
QCORP_MAGIC = b"QCR1"
QCORP_VERSION = 1
BOS_ID = 0

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u32": np.dtype("<u4")}


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- QWT

def encode_qwt(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    records, chunks, offset = {}, [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        for tag, dt in _DTYPES.items():
            if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
                break
        else:
            raise DataFormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        records[name] = {"dtype": tag, "shape": list(arr.shape), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "tensors": records},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return QWT_MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def decode_qwt(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < 8:
        raise TruncatedError("file too short for a QWT header")
    if buf[:4] != QWT_MAGIC:
        raise MagicError(f"unknown magic bytes {buf[:4]!r}, expected {QWT_MAGIC!r}")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + hlen:
        raise TruncatedError("header extends past end of file")
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
        records = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataFormatError(f"malformed QWT header: {exc}") from exc
    data = memoryview(buf)[8 + hlen:]
    tensors = {}
    end_max = 0
    for name, rec in records.items():
        dt = _DTYPES.get(rec.get("dtype"))
        if dt is None:
            raise DataFormatError(f"{name}: unknown dtype {rec.get('dtype')!r}")
        shape = tuple(int(s) for s in rec["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start, end = int(rec["offset"]), int(rec["offset"]) + n * dt.itemsize
        if end > len(data):
            raise TruncatedError(f"{name}: tensor data truncated ({len(data)} < {end} bytes)")
        end_max = max(end_max, end)
        arr = np.frombuffer(data[start:end], dtype=dt).reshape(shape).copy()
        arr.setflags(write=False)
        tensors[name] = arr
    if end_max != len(data):
        raise DataFormatError(f"{len(data) - end_max} trailing bytes after tensor data")
    return tensors, header.get("meta", {})


def model_tensors(model: ModelWeights) -> dict[str, np.ndarray]:
    return dict(model.named_tensors())


def model_from_tensors(config: ModelConfig, t: Mapping[str, np.ndarray]) -> ModelWeights:
    def take(name, shape):
        if name not in t:
            raise ShapeError(f"missing tensor {name}")
        if tuple(t[name].shape) != tuple(shape):
            raise ShapeError(f"{name}: header config implies shape {tuple(shape)}, tensor has {tuple(t[name].shape)}")
        if t[name].dtype != np.float32:
            raise DataFormatError(f"{name}: model tensors must be f32")
        return t[name]

    d, V = config.d_model, config.vocab_size
    layers = []
    for l in range(config.n_layers):
        kw = {g: take(f"layers.{l}.{g}", (d,)) for g in NORMS}
        kw.update({p: take(f"layers.{l}.{p}", config.projection_shape(p)) for p in PROJECTIONS})
        layers.append(LayerWeights(**kw))
    return ModelWeights(config=config, embed=take("embed", (V, d)), layers=tuple(layers),
                        final_norm=take("final_norm", (d,)), unembed=take("unembed", (V, d)))


def encode_weights(model: ModelWeights) -> bytes:
    return encode_qwt(model_tensors(model), {"config": model.config.to_dict(), "kind": "model"})


def save_weights(model: ModelWeights, path) -> None:
    atomic_write_bytes(path, encode_weights(model))


def decode_weights(buf: bytes) -> ModelWeights:
    tensors, meta = decode_qwt(buf)
    try:
        config = ModelConfig.from_dict(meta["config"])
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"QWT header lacks a model config: {exc}") from exc
    return model_from_tensors(config, tensors)


def load_weights(path) -> ModelWeights:
    return decode_weights(Path(path).read_bytes())


# ---------------------------------------------------------------- QCORP

@dataclass(frozen=True)
class TokenCorpus:
    """Ordered documents of token ids. Each document starts with the BOS id 0."""

    doc_ids: tuple[int, ...]
    docs: tuple[np.ndarray, ...]
    vocab_size: int
    truncation: int = 512

    def __post_init__(self):
        if len(self.doc_ids) != len(self.docs):
            raise ValueError("doc_ids and docs differ in length")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise DataFormatError("duplicate doc_id in corpus")
        docs = []
        for i, d in zip(self.doc_ids, self.docs):
            a = np.asarray(d, dtype=np.int64)[: self.truncation + 1]
            if a.size == 0:
                raise DataFormatError(f"document {i} is empty")
            if a.min() < 0 or a.max() >= self.vocab_size:
                raise DataFormatError(f"document {i} has a token id outside [0, {self.vocab_size})")
            a.setflags(write=False)
            docs.append(a)
        object.__setattr__(self, "docs", tuple(docs))
        object.__setattr__(self, "doc_ids", tuple(int(i) for i in self.doc_ids))

    def __len__(self) -> int:
        return len(self.docs)

    def __iter__(self) -> Iterator[tuple[int, np.ndarray]]:
        return iter(zip(self.doc_ids, self.docs))

    def doc(self, doc_id: int) -> np.ndarray:
        try:
            return self.docs[self._index[doc_id]]
        except KeyError:
            raise UnknownDocError(f"unknown doc_id {doc_id}") from None

    @property
    def _index(self) -> dict[int, int]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {d: i for i, d in enumerate(self.doc_ids)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def subset(self, doc_ids: Sequence[int]) -> "TokenCorpus":
        return TokenCorpus(tuple(doc_ids), tuple(self.doc(i) for i in doc_ids),
                           self.vocab_size, self.truncation)

    @property
    def digest(self) -> str:
        return hashlib.sha256(encode_corpus(self)).hexdigest()


def encode_corpus(corpus: TokenCorpus) -> bytes:
    parts = [QCORP_MAGIC, struct.pack("<III", QCORP_VERSION, corpus.vocab_size, len(corpus))]
    for doc_id, doc in corpus:
        parts.append(struct.pack("<II", doc_id, doc.size))
        parts.append(doc.astype("<u4").tobytes())
    return b"".join(parts)


def decode_corpus(buf: bytes, truncation: int = 512) -> TokenCorpus:
    if len(buf) < 16:
        raise TruncatedError("file too short for a QCORP header")
    if buf[:4] != QCORP_MAGIC:
        raise MagicError(f"unknown magic bytes {buf[:4]!r}, expected {QCORP_MAGIC!r}")
    version, vocab, n = struct.unpack("<III", buf[4:16])
    if version != QCORP_VERSION:
        raise DataFormatError(f"unsupported QCORP version {version}")
    pos, ids, docs = 16, [], []
    for _ in range(n):
        if pos + 8 > len(buf):
            raise TruncatedError("document header truncated")
        doc_id, length = struct.unpack("<II", buf[pos:pos + 8])
        pos += 8
        if pos + 4 * length > len(buf):
            raise TruncatedError(f"document {doc_id} truncated")
        docs.append(np.frombuffer(buf, dtype="<u4", count=length, offset=pos).astype(np.int64))
        ids.append(doc_id)
        pos += 4 * length
    if pos != len(buf):
        raise DataFormatError(f"{len(buf) - pos} trailing bytes after last document")
    return TokenCorpus(tuple(ids), tuple(docs), vocab, truncation)


def save_corpus(corpus: TokenCorpus, path) -> None:
    atomic_write_bytes(path, encode_corpus(corpus))


def load_corpus(path, truncation: int = 512) -> TokenCorpus:
    return decode_corpus(Path(path).read_bytes(), truncation)
