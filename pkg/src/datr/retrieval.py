"""Two-stage inference: exact cosine top-K, then fused-query re-ranking.

The index stores one unit-norm embedding per video in a contiguous row-major
matrix, rows sorted by video id. Cosine against unit rows is a dot product,
so stage I reduces to a fused matrix-vector scoring + top-K selection kernel
(compiled when available). Ordering is strictly deterministic: stage-I ties
break by ascending video id; stage-II ties by higher stage-I score, then id.

Index file layout (little-endian):

    magic   6 bytes  "DATRI\\0"
    version u16
    n       u32      row count
    d       u32      embedding width
    width   u8       scalar width in bytes (4 or 8)
    hash    32 bytes checkpoint SHA-256 the rows were computed with
    ids     n *      (u16 length + UTF-8 video id)
    rows    n*d      raw scalars, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from datr import autodiff as ad
from datr._kernels import topk_dot
from datr.data import Corpus
from datr.model import FUSION_MODES, Model

INDEX_MAGIC = b"DATRI\x00"
INDEX_VERSION = 1


class IndexError_(ValueError):
    """Index construction or lookup failure."""


class EmptyIndexError(IndexError_):
    """Retrieval against an index with no rows."""


class FormatError(ValueError):
    """Malformed index file; carries the byte offset."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: {message} (at byte {offset})")
        self.path = str(path)
        self.offset = offset


@dataclass
class RankedEntry:
    video_id: str
    stage1_score: float
    stage2_score: Optional[float] = None


@dataclass
class RankedList:
    entries: list[RankedEntry]
    stage: str  # "stage1" | "stage2"
    clamped: bool = False

    @property
    def ids(self) -> list[str]:
        return [e.video_id for e in self.entries]

    def head(self, m: int) -> "RankedList":
        return RankedList(self.entries[:m], self.stage, self.clamped)


class EmbeddingIndex:
    """Unit-norm video embeddings in a dense matrix, rows sorted by id."""

    def __init__(self, ids: list[str], matrix: np.ndarray, checkpoint_hash: bytes):
        if len(ids) != matrix.shape[0]:
            raise IndexError_(f"{len(ids)} ids but {matrix.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise IndexError_("duplicate video ids in index")
        if len(checkpoint_hash) != 32:
            raise IndexError_("checkpoint hash must be 32 bytes")
        if matrix.size:
            norms = np.linalg.norm(matrix, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-5)
            if bad.size:
                raise IndexError_(f"non-unit rows at positions {bad[:4].tolist()}")
        self.ids = list(ids)
        self.matrix = np.ascontiguousarray(matrix)
        self.checkpoint_hash = checkpoint_hash
        self._row_of = {vid: i for i, vid in enumerate(self.ids)}

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row(self, video_id: str) -> np.ndarray:
        try:
            return self.matrix[self._row_of[video_id]]
        except KeyError:
            raise IndexError_(f"video id {video_id!r} not in index") from None

    def save(self, path) -> None:
        path = Path(path)
        width = self.matrix.dtype.itemsize
        with open(path, "wb") as f:
            f.write(INDEX_MAGIC)
            f.write(struct.pack("<H", INDEX_VERSION))
            f.write(struct.pack("<I", self.size))
            f.write(struct.pack("<I", self.dim))
            f.write(struct.pack("<B", width))
            f.write(self.checkpoint_hash)
            for vid in self.ids:
                encoded = vid.encode("utf-8")
                f.write(struct.pack("<H", len(encoded)))
                f.write(encoded)
            f.write(np.ascontiguousarray(self.matrix, dtype=f"<f{width}").tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        path = Path(path)
        with open(path, "rb") as f:
            magic = f.read(6)
            if magic != INDEX_MAGIC:
                raise FormatError(path, 0, f"bad magic {magic!r}, expected {INDEX_MAGIC!r}")
            header = f.read(11)
            if len(header) != 11:
                raise FormatError(path, 6, "truncated header")
            version, n, d, width = struct.unpack("<HIIB", header)
            if version != INDEX_VERSION:
                raise FormatError(path, 6, f"unsupported version {version}")
            if width not in (4, 8):
                raise FormatError(path, 16, f"scalar width must be 4 or 8, got {width}")
            checkpoint_hash = f.read(32)
            if len(checkpoint_hash) != 32:
                raise FormatError(path, 17, "truncated checkpoint hash")
            ids = []
            for _ in range(n):
                off = f.tell()
                raw = f.read(2)
                if len(raw) != 2:
                    raise FormatError(path, off, "truncated id length")
                (ln,) = struct.unpack("<H", raw)
                encoded = f.read(ln)
                if len(encoded) != ln:
                    raise FormatError(path, off + 2, "truncated id")
                ids.append(encoded.decode("utf-8"))
            expected = n * d * width
            off = f.tell()
            payload = f.read(expected)
            if len(payload) != expected:
                raise FormatError(path, off + len(payload),
                                  f"truncated rows: wanted {expected} bytes, "
                                  f"got {len(payload)}")
            if f.read(1):
                raise FormatError(path, off + expected, "trailing bytes after rows")
        matrix = np.frombuffer(payload, dtype=f"<f{width}").reshape(n, d).copy()
        return cls(ids, matrix, checkpoint_hash)


def build_index(corpus: Corpus, model: Model,
                checkpoint_hash: bytes = b"\x00" * 32) -> EmbeddingIndex:
    """Embed every corpus video; rows land in ascending video-id order."""
    ids = corpus.video_ids
    d = model.config.embed_dim
    matrix = np.empty((len(ids), d), dtype=model.config.np_dtype)
    for i, vid in enumerate(ids):
        try:
            feats = corpus.features(vid)
        except Exception as exc:
            raise IndexError_(f"video {vid!r}: cannot load features: {exc}") from exc
        matrix[i] = model.encode_video(feats).data
    return EmbeddingIndex(ids, matrix, checkpoint_hash)


def stage1_retrieve(query: str, model: Model, index: EmbeddingIndex, k: int) -> RankedList:
    """Exact cosine top-k of the query embedding against all index rows."""
    if k < 1:
        raise IndexError_(f"k must be >= 1, got {k}")
    if index.size == 0:
        raise EmptyIndexError("stage-I retrieval over an empty index")
    z = model.encode_text(query).data.astype(index.matrix.dtype, copy=False)
    idx, scores = topk_dot(index.matrix, z, min(k, index.size))
    entries = [RankedEntry(index.ids[i], float(s)) for i, s in zip(idx, scores)]
    return RankedList(entries, "stage1")


def stage2_rerank(q_first: str, q_latest: str, candidates: RankedList, model: Model,
                  index: EmbeddingIndex, m: int,
                  fusion_mode: str = "full") -> RankedList:
    """Re-score stage-I candidates with the fused query; keep the top m."""
    if fusion_mode not in FUSION_MODES:
        raise IndexError_(f"fusion mode must be one of {FUSION_MODES}")
    clamped = m > len(candidates.entries)
    m = min(m, len(candidates.entries))
    z_first = model.encode_text(q_first)
    z_latest = model.encode_text(q_latest)
    z_fused = model.fuse(z_first, z_latest, mode=fusion_mode).data
    rows = np.stack([index.row(e.video_id) for e in candidates.entries])
    scores = model.rerank_scores_batch(
        z_fused.astype(rows.dtype, copy=False), rows)
    order = sorted(range(len(scores)),
                   key=lambda i: (-scores[i],
                                  -candidates.entries[i].stage1_score,
                                  candidates.entries[i].video_id))
    entries = [RankedEntry(candidates.entries[i].video_id,
                           candidates.entries[i].stage1_score,
                           float(scores[i]))
               for i in order[:m]]
    return RankedList(entries, "stage2", clamped=clamped)


@dataclass
class PipelineConfig:
    k: int = 100          # stage-I candidate pool
    m: int = 10           # results returned
    stage2: bool = True
    fusion_mode: str = "full"

    def validate(self) -> None:
        if not (self.k >= self.m >= 1):
            raise IndexError_(f"need k >= m >= 1, got k={self.k}, m={self.m}")
        if self.fusion_mode not in FUSION_MODES:
            raise IndexError_(f"fusion mode must be one of {FUSION_MODES}")


@dataclass
class SessionState:
    """One interactive search session: query history plus last results."""

    session_id: str
    turns: list[str] = field(default_factory=list)
    last_candidates: Optional[RankedList] = None
    last_results: Optional[RankedList] = None


def run_pipeline(session: SessionState, new_query: str, model: Model,
                 index: EmbeddingIndex, config: PipelineConfig) -> RankedList:
    """Advance a session by one turn and return the ranked results.

    Turn 1 is coarse-only. Later turns retrieve candidates with the session's
    first query and re-rank them against the newest refinement (unless
    stage II is disabled, in which case the coarse head is returned).
    """
    config.validate()
    if not new_query.strip():
        raise ValueError("empty query")
    session.turns.append(new_query)
    first = session.turns[0]
    candidates = stage1_retrieve(first, model, index, config.k)
    session.last_candidates = candidates
    if len(session.turns) == 1 or not config.stage2:
        results = candidates.head(config.m)
    else:
        results = stage2_rerank(first, new_query, candidates, model, index,
                                config.m, config.fusion_mode)
    session.last_results = results
    return results


def full_ranking(q_first: str, q_latest: Optional[str], model: Model,
                 index: EmbeddingIndex, k: int, stage2: bool,
                 fusion_mode: str = "full") -> list[str]:
    """Total ordering of every indexed video, for rank-based evaluation.

    Stage II reorders only the stage-I top-k prefix; the tail keeps its
    stage-I order below the re-ranked block.
    """
    everything = stage1_retrieve(q_first, model, index, index.size)
    if not stage2 or q_latest is None:
        return everything.ids
    prefix = RankedList(everything.entries[:min(k, index.size)], "stage1")
    reranked = stage2_rerank(q_first, q_latest, prefix, model, index,
                             len(prefix.entries), fusion_mode)
    return reranked.ids + everything.ids[len(prefix.entries):]
