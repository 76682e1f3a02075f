"""Side-channel traces, Hamming-weight leakage, NICV and first-order CPA.

A trace is a ``(n, 5)`` uint32 array of ``<pc, insn, r0, r1, r2>`` samples.
Leakage points are the Hamming weights of those words, five per sample in
field order.  Traces of unequal length are truncated to the shortest one
before any statistic is computed; no realignment is attempted.

``PTRC`` file layout (little-endian)::

    b"PTRC"  u32 version (1)  u32 trace count
    per trace: u32 sample count n, then 5 * n u32 words

The sidecar metadata is a JSON object with at least ``algorithm``, ``key``
(hex) and ``plaintexts`` (one hex string per trace).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PTRC_MAGIC = b"PTRC"
PTRC_VERSION = 1
FIELDS = 5

AES_SBOX = np.array([
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
], dtype=np.uint8)

CHUNK = 2048  # leakage columns processed at a time


class TraceFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# trace files
# --------------------------------------------------------------------------


def as_trace(samples) -> np.ndarray:
    a = np.asarray(samples, dtype=np.uint32)
    if a.ndim == 1:
        if a.size % FIELDS:
            raise TraceFormatError("flat trace length is not a multiple of 5")
        a = a.reshape(-1, FIELDS)
    if a.ndim != 2 or a.shape[1] != FIELDS:
        raise TraceFormatError("a trace must have shape (n, 5)")
    return a


class TraceWriter:
    """Stream traces into a ``PTRC`` file; the count is written on close."""

    def __init__(self, path):
        self.path = Path(path)
        self.fh = open(self.path, "wb")
        self.fh.write(PTRC_MAGIC + struct.pack("<II", PTRC_VERSION, 0))
        self.count = 0

    def write(self, trace) -> None:
        t = as_trace(trace)
        self.fh.write(struct.pack("<I", t.shape[0]))
        self.fh.write(t.astype("<u4", copy=False).tobytes())
        self.count += 1

    def close(self) -> None:
        if self.fh.closed:
            return
        self.fh.seek(8)
        self.fh.write(struct.pack("<I", self.count))
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_traces(path, traces: Iterable) -> int:
    with TraceWriter(path) as w:
        for t in traces:
            w.write(t)
        return w.count


def iter_traces(path) -> Iterator[np.ndarray]:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12 or head[:4] != PTRC_MAGIC:
            raise TraceFormatError("not a PTRC file")
        version, count = struct.unpack("<II", head[4:])
        if version != PTRC_VERSION:
            raise TraceFormatError(f"unsupported PTRC version {version}")
        for k in range(count):
            raw = fh.read(4)
            if len(raw) != 4:
                raise TraceFormatError(f"truncated file: trace {k} of {count} missing")
            (n,) = struct.unpack("<I", raw)
            body = fh.read(4 * FIELDS * n)
            if len(body) != 4 * FIELDS * n:
                raise TraceFormatError(f"truncated payload in trace {k}")
            yield np.frombuffer(body, dtype="<u4").reshape(n, FIELDS).astype(np.uint32)
        if fh.read(1):
            raise TraceFormatError("trailing bytes after the declared traces")


def read_traces(path) -> list[np.ndarray]:
    return list(iter_traces(path))


@dataclass
class TraceMeta:
    algorithm: str
    key: bytes
    plaintexts: list[bytes]
    extra: dict = field(default_factory=dict)

    def plaintext_array(self) -> np.ndarray:
        return np.frombuffer(b"".join(self.plaintexts), dtype=np.uint8).reshape(len(self.plaintexts), -1)

    def to_json(self) -> str:
        doc = {"algorithm": self.algorithm, "key": self.key.hex(), "count": len(self.plaintexts),
               "plaintexts": [p.hex() for p in self.plaintexts], **self.extra}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TraceMeta":
        doc = json.loads(text)
        pts = [bytes.fromhex(p) for p in doc.pop("plaintexts")]
        if doc.pop("count", len(pts)) != len(pts):
            raise TraceFormatError("metadata count does not match its plaintext list")
        return cls(doc.pop("algorithm"), bytes.fromhex(doc.pop("key")), pts, doc)


def write_meta(path, meta: TraceMeta) -> None:
    Path(path).write_text(meta.to_json())


def read_meta(path) -> TraceMeta:
    return TraceMeta.from_json(Path(path).read_text())


# --------------------------------------------------------------------------
# leakage
# --------------------------------------------------------------------------


def hamming_weight(words) -> np.ndarray:
    return np.bitwise_count(np.asarray(words, dtype=np.uint32)).astype(np.uint8)


def leakage_row(trace, max_samples: int | None = None) -> np.ndarray:
    t = as_trace(trace)
    if max_samples is not None:
        t = t[:max_samples]
    return hamming_weight(t).reshape(-1)


def leakage_matrix(traces: Sequence, max_samples: int | None = None) -> np.ndarray:
    """HW leakage, one row per trace, truncated to the shortest trace."""
    rows = [leakage_row(t, max_samples) for t in traces]
    if not rows:
        raise ValueError("no traces")
    n = min(r.size for r in rows)
    return np.stack([r[:n] for r in rows])


def _class_sums(X: np.ndarray, classes: np.ndarray, cols: slice) -> tuple[np.ndarray, np.ndarray]:
    """Per-class column sums (256 x C, float64) and class counts."""
    order = np.argsort(classes, kind="stable")
    counts = np.bincount(classes, minlength=256)
    present = np.flatnonzero(counts)
    starts = np.concatenate(([0], np.cumsum(counts[present])[:-1]))
    sums = np.zeros((256, cols.stop - cols.start))
    block = X[order, cols].astype(np.float64)
    sums[present] = np.add.reduceat(block, starts, axis=0)
    return sums, counts


def _moments(X: np.ndarray, cols: slice) -> tuple[np.ndarray, np.ndarray]:
    block = X[:, cols].astype(np.float64)
    return block.sum(axis=0), np.square(block).sum(axis=0)


def nicv(X: np.ndarray, classes) -> np.ndarray:
    """Var(E[X|Z]) / Var(X) per column; zero-variance columns report 0."""
    X = np.asarray(X)
    classes = np.asarray(classes, dtype=np.int64)
    n = X.shape[0]
    if n < 2:
        raise ValueError("NICV needs at least two traces")
    out = np.zeros(X.shape[1])
    for c0 in range(0, X.shape[1], CHUNK):
        cols = slice(c0, min(c0 + CHUNK, X.shape[1]))
        sums, counts = _class_sums(X, classes, cols)
        s1, s2 = _moments(X, cols)
        mean = s1 / n
        var = s2 / n - mean**2
        present = counts > 0
        between = (np.square(sums[present]) / counts[present, None]).sum(axis=0) / n - mean**2
        ok = var > 1e-12 * np.maximum(1.0, mean**2)
        out[cols] = np.where(ok, between / np.where(ok, var, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def nicv_bytes(X: np.ndarray, plaintexts: np.ndarray) -> np.ndarray:
    """NICV per key byte (class = plaintext byte); shape (nbytes, T)."""
    return np.stack([nicv(X, plaintexts[:, b]) for b in range(plaintexts.shape[1])])


HW8 = np.bitwise_count(np.arange(256, dtype=np.uint8)).astype(np.float64)


def hypothesis_table(sbox: np.ndarray = AES_SBOX) -> np.ndarray:
    """H[k, v] = HW(Sbox(v xor k))."""
    v = np.arange(256)
    return HW8[sbox[np.bitwise_xor.outer(np.arange(256), v)]]


@dataclass
class CpaByte:
    byte: int
    scores: np.ndarray  # (256,) max_t |rho|
    true_key: int | None = None

    @property
    def best(self) -> int:
        return int(np.argmax(self.scores))

    def rank(self, k: int | None = None) -> int:
        k = self.true_key if k is None else k
        return 1 + int(np.count_nonzero(self.scores > self.scores[k]))


def cpa_byte(X: np.ndarray, classes, byte: int = 0, true_key: int | None = None,
             table: np.ndarray | None = None) -> CpaByte:
    """Pearson correlation of HW(Sbox(pt ^ k)) with every column; score = max |rho|."""
    X = np.asarray(X)
    classes = np.asarray(classes, dtype=np.int64)
    H = hypothesis_table() if table is None else table
    n = X.shape[0]
    scores = np.zeros(256)
    for c0 in range(0, X.shape[1], CHUNK):
        cols = slice(c0, min(c0 + CHUNK, X.shape[1]))
        sums, counts = _class_sums(X, classes, cols)
        s1, s2 = _moments(X, cols)
        sh = H @ counts
        shh = np.square(H) @ counts
        shx = H @ sums
        num = n * shx - np.outer(sh, s1)
        den_h = n * shh - sh**2
        den_x = n * s2 - s1**2
        den = np.sqrt(np.clip(np.outer(den_h, den_x), 0.0, None))
        rho = np.divide(num, den, out=np.zeros_like(num), where=den > 1e-9)
        scores = np.maximum(scores, np.abs(rho).max(axis=1))
    return CpaByte(byte, scores, true_key)


def cpa(X: np.ndarray, plaintexts: np.ndarray, key: bytes | None = None) -> list[CpaByte]:
    H = hypothesis_table()
    return [cpa_byte(X, plaintexts[:, b], b, None if key is None else key[b], H)
            for b in range(plaintexts.shape[1])]


def convergence(X: np.ndarray, plaintexts: np.ndarray, key: bytes,
                checkpoints: Iterable[int]) -> list[tuple[int, int, int, float]]:
    """Rank of the true key byte over trace-count prefixes: (n, byte, rank, true score)."""
    rows = []
    H = hypothesis_table()
    for n in sorted(set(int(c) for c in checkpoints if 2 <= c <= X.shape[0])):
        for b in range(plaintexts.shape[1]):
            r = cpa_byte(X[:n], plaintexts[:n, b], b, key[b], H)
            rows.append((n, b, r.rank(), float(r.scores[key[b]])))
    return rows


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

NICV_HEADER = ("t", "byte", "value")
CPA_HEADER = ("byte", "k", "score", "rank")
CONVERGENCE_HEADER = ("n_traces", "byte", "rank", "score")


def write_nicv_csv(path, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(NICV_HEADER)
        for b in range(values.shape[0]):
            for t in range(values.shape[1]):
                w.writerow((t, b, repr(float(values[b, t]))))


def write_cpa_csv(path, results: Sequence[CpaByte]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CPA_HEADER)
        for r in results:
            for k in range(256):
                w.writerow((r.byte, k, repr(float(r.scores[k])), r.rank(k)))


def write_convergence_csv(path, rows: Iterable[tuple[int, int, int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CONVERGENCE_HEADER)
        for n, b, rank, score in rows:
            w.writerow((n, b, rank, repr(float(score))))


def read_csv(path) -> tuple[tuple[str, ...], list[tuple[str, ...]]]:
    with open(path, newline="") as fh:
        rows = [tuple(r) for r in csv.reader(fh)]
    return rows[0], rows[1:]
