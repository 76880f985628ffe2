"""Embedding-bank files and ROI manifests.

Text format::

    EMB <dim> <count>
    <id> <v_1> ... <v_dim>
    ...

Binary format: ``b"EMB0"``, u32 dim, u32 count, then per record a u64 id and
``dim`` float32 values, all little-endian.

Vectors are unit-normalized on load.  A vector already unit-norm to the
precision of its storage (1e-12 for text, 1e-6 for float32) is kept as-is,
which makes save/load round trips bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .boxes import BoxParams

_BIN_HEADER = struct.Struct("<4sII")
_TEXT_TOL = 1e-12
_F32_TOL = 1e-6


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingBank:
    ids: tuple[int, ...]
    vectors: np.ndarray  # (count, dim)
    source: str = ""

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise EmbeddingFormatError("duplicate ids in embedding bank")
        if self.vectors.shape[0] != len(self.ids):
            raise EmbeddingFormatError("ids and vectors disagree in count")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, roi_id) -> bool:
        return roi_id in self._index

    def __getitem__(self, roi_id: int) -> np.ndarray:
        return self.vectors[self._index[roi_id]]

    @property
    def _index(self) -> dict[int, int]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {k: i for i, k in enumerate(self.ids)}
            object.__setattr__(self, "_idx", idx)
        return idx

    @property
    def manifest(self) -> dict:
        return {"path": self.source, "dim": self.dim, "count": len(self)}

    @classmethod
    def from_mapping(cls, mapping: dict[int, np.ndarray], dim: int | None = None,
                     source: str = "") -> "EmbeddingBank":
        ids = tuple(int(k) for k in mapping)
        if ids:
            vecs = np.stack([np.asarray(mapping[k], dtype=np.float64) for k in mapping])
        else:
            vecs = np.zeros((0, dim or 0))
        return cls(ids, _normalize_rows(vecs, _TEXT_TOL), source)


def _normalize_rows(vecs: np.ndarray, tol: float) -> np.ndarray:
    if not np.all(np.isfinite(vecs)):
        raise EmbeddingFormatError("non-finite value in embeddings")
    norms = np.linalg.norm(vecs, axis=1)
    if np.any(norms == 0):
        raise EmbeddingFormatError("zero-norm embedding")
    out = vecs.copy()
    redo = np.abs(norms - 1.0) > tol
    out[redo] = vecs[redo] / norms[redo, None]
    return out


def load_embeddings(path) -> EmbeddingBank:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == b"EMB0":
        return _load_binary(data, str(path))
    return _load_text(data.decode("utf-8"), str(path))


def _load_text(text: str, source: str) -> EmbeddingBank:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise EmbeddingFormatError(f"{source}: missing header")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "EMB":
        raise EmbeddingFormatError(f"{source}: line 1: expected 'EMB <dim> <count>'")
    try:
        dim, count = int(head[1]), int(head[2])
    except ValueError:
        raise EmbeddingFormatError(f"{source}: line 1: bad dim/count") from None
    if len(lines) - 1 != count:
        raise EmbeddingFormatError(f"{source}: header says {count} records, found {len(lines) - 1}")
    ids, rows = [], []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != dim + 1:
            raise EmbeddingFormatError(
                f"{source}: line {lineno}: expected {dim} values, found {len(parts) - 1}")
        try:
            ids.append(int(parts[0]))
            rows.append([float(v) for v in parts[1:]])
        except ValueError:
            raise EmbeddingFormatError(f"{source}: line {lineno}: unparsable record") from None
    if len(set(ids)) != len(ids):
        raise EmbeddingFormatError(f"{source}: duplicate roi_id")
    vecs = np.array(rows, dtype=np.float64).reshape(count, dim)
    return EmbeddingBank(tuple(ids), _normalize_rows(vecs, _TEXT_TOL), source)


def _load_binary(data: bytes, source: str) -> EmbeddingBank:
    if len(data) < _BIN_HEADER.size:
        raise EmbeddingFormatError(f"{source}: truncated header")
    _, dim, count = _BIN_HEADER.unpack_from(data)
    rec = np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])
    body = data[_BIN_HEADER.size:]
    if len(body) != rec.itemsize * count:
        raise EmbeddingFormatError(
            f"{source}: expected {rec.itemsize * count} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=rec, count=count)
    ids = tuple(int(i) for i in arr["id"])
    if len(set(ids)) != len(ids):
        raise EmbeddingFormatError(f"{source}: duplicate roi_id")
    vecs = arr["v"].astype(np.float64).reshape(count, dim)
    return EmbeddingBank(ids, _normalize_rows(vecs, _F32_TOL), source)


def save_embeddings(bank: EmbeddingBank, path, binary: bool = False) -> None:
    if binary:
        rec = np.dtype([("id", "<u8"), ("v", "<f4", (bank.dim,))])
        arr = np.empty(len(bank), dtype=rec)
        arr["id"] = bank.ids
        arr["v"] = bank.vectors
        payload = _BIN_HEADER.pack(b"EMB0", bank.dim, len(bank)) + arr.tobytes()
        with open(path, "wb") as fh:
            fh.write(payload)
        return
    lines = [f"EMB {bank.dim} {len(bank)}"]
    for roi_id, v in zip(bank.ids, bank.vectors):
        lines.append(" ".join([str(roi_id)] + [repr(float(x)) for x in v]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class RoiRecord:
    roi_id: int
    stream_id: str
    box: BoxParams
    split: str = "base"
    window: tuple[int, int] | None = None  # time window the crop refers to
    class_name: str | None = None

    def to_json(self) -> dict:
        d = {"roi_id": self.roi_id, "stream_id": self.stream_id,
             "box": self.box.as_list(), "split": self.split}
        if self.window is not None:
            d["window"] = list(self.window)
        if self.class_name is not None:
            d["class_name"] = self.class_name
        return d


def load_roi_manifest(path) -> list[RoiRecord]:
    with open(path) as fh:
        doc = json.load(fh)
    out = []
    for i, r in enumerate(doc):
        if r.get("split", "base") not in ("base", "novel"):
            raise EmbeddingFormatError(f"{path}: record {i}: split must be base|novel")
        window = tuple(r["window"]) if r.get("window") is not None else None
        out.append(RoiRecord(int(r["roi_id"]), str(r["stream_id"]),
                             BoxParams.from_list(r["box"]), r.get("split", "base"),
                             window, r.get("class_name")))
    if len({r.roi_id for r in out}) != len(out):
        raise EmbeddingFormatError(f"{path}: duplicate roi_id")
    return out


def save_roi_manifest(records: list[RoiRecord], path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_json() for r in records], fh, indent=1, sort_keys=True)
