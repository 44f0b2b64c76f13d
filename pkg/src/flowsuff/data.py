"""Embedding sets and their binary container format.

Container layout (version 1): magic ``FEMB``, u16 version, u32 header
length, UTF-8 JSON header with keys (schema_version, model_id, n, d,
dtype="f32", row_major=true, corpus_hash), then the payload of n*d
little-endian 32-bit floats in row-major order. The corpus hash must be
identical across every model of a pool; it is the row-alignment guarantee.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

_MAGIC = b"FEMB"
_VERSION = 1
SCHEMA_VERSION = 1


@dataclass
class EmbeddingSet:
    model_id: str
    values: np.ndarray
    corpus_hash: str = ""

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DataError(f"{self.model_id}: embeddings must be a 2-D matrix")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def corpus_hash_for(tag: str, n: int) -> str:
    """Stable row-alignment hash for a named corpus of n rows."""
    return hashlib.sha256(f"{tag}:{int(n)}".encode("utf-8")).hexdigest()[:16]


def write_embeddings(emb: EmbeddingSet, path) -> None:
    header = {
        "schema_version": SCHEMA_VERSION,
        "model_id": emb.model_id,
        "n": emb.n,
        "d": emb.d,
        "dtype": "f32",
        "row_major": True,
        "corpus_hash": emb.corpus_hash,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(emb.values, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<H", _VERSION))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(payload)


def read_embeddings(path) -> EmbeddingSet:
    """Load and validate a container; rejects truncation and non-finite rows."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if len(raw) < 10 or raw[:4] != _MAGIC:
        raise DataError(f"{path}: not an embedding container (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    (hlen,) = struct.unpack_from("<I", raw, 6)
    try:
        header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: header does not parse: {e}") from e
    n, d = int(header["n"]), int(header["d"])
    payload = raw[10 + hlen :]
    expected = 4 * n * d
    if len(payload) != expected:
        raise DataError(
            f"{path}: corrupt payload, expected {expected} bytes for "
            f"{n}x{d} f32 but found {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    bad = np.nonzero(~np.all(np.isfinite(values), axis=1))[0]
    if bad.size:
        raise DataError(
            f"{path}: non-finite values in rows {bad[:20].tolist()}"
            + ("..." if bad.size > 20 else "")
        )
    return EmbeddingSet(
        model_id=str(header["model_id"]),
        values=values.astype(np.float32),
        corpus_hash=str(header.get("corpus_hash", "")),
    )


def import_npy(path, model_id: str, corpus_tag: str) -> EmbeddingSet:
    """Converter for the common .npy v1.0 array container (not a hot path)."""
    arr = np.load(path)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a 2-D array, got shape {arr.shape}")
    return EmbeddingSet(
        model_id=model_id,
        values=arr.astype(np.float32),
        corpus_hash=corpus_hash_for(corpus_tag, arr.shape[0]),
    )


def check_pool_alignment(pool: list[EmbeddingSet]) -> None:
    """All sets in a pool must share corpus hash and row count."""
    if not pool:
        raise DataError("empty model pool")
    n0, h0 = pool[0].n, pool[0].corpus_hash
    for emb in pool[1:]:
        if emb.n != n0:
            raise DataError(
                f"row count mismatch: {pool[0].model_id} has {n0}, {emb.model_id} has {emb.n}"
            )
        if emb.corpus_hash != h0:
            raise DataError(
                f"corpus hash mismatch between {pool[0].model_id} and {emb.model_id}; "
                "sets from different corpora cannot enter one pool"
            )
    ids = [e.model_id for e in pool]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate model ids in pool: {ids}")
