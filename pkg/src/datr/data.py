"""Corpus schemas, frame-feature files, and the synthetic corpus generator.

A corpus directory holds:

    triplets.jsonl    one record per line: {id, video_id, q1, d_v, q2, source_id}
    manifest.jsonl    one line per video: {video_id, feature_path, source_id}
    features/*.mhvf   per-video frame-feature matrices (f32 on disk)
    latents.json      generator ground truth (synthetic corpora only)

The synthetic corpus is built so that the coarse first query is ambiguous
among a topic's detail variants while the refined second query pins the
detail down. Topic identity is carried by a *pair* of attribute words drawn
from two shared pools, and detail words are shared across topics; a grouped
split by topic therefore holds out unseen word combinations, never unseen
words, which keeps held-out retrieval learnable.

The refinement restates only one of the two attribute words before adding
the detail word, so it narrows the first query without replacing it: q2
alone is ambiguous across topics sharing that attribute, and resolving the
session takes both turns together. Refinements also carry one of a few
shared variant words bound to per-video latent directions (the analogue of
a refinement citing a visual detail specific to one demonstration), which
makes the refined target identifiable instead of tied among its detail
mates.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

FEATURE_MAGIC = b"MHVF"
FEATURE_VERSION = 1


class CorpusError(ValueError):
    """Malformed corpus contents."""


class FormatError(ValueError):
    """Malformed binary feature file; carries the byte offset."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: {message} (at byte {offset})")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True)
class TripletRecord:
    id: str
    video_id: str
    q1: str
    d_v: str
    q2: str
    source_id: str


REQUIRED_TRIPLET_FIELDS = ("id", "video_id", "q1", "d_v", "q2", "source_id")


def load_triplets(path, known_videos: Optional[set[str]] = None) -> list[TripletRecord]:
    """Parse a triplets JSONL file, validating schema and referential integrity."""
    records: list[TripletRecord] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            for fname in REQUIRED_TRIPLET_FIELDS:
                if fname not in raw:
                    raise CorpusError(f"{path}:{lineno}: missing field {fname!r}")
                if not isinstance(raw[fname], str):
                    raise CorpusError(f"{path}:{lineno}: field {fname!r} must be a string")
            if not raw["q1"] or not raw["q2"]:
                raise CorpusError(f"{path}:{lineno}: q1 and q2 must be non-empty")
            if raw["id"] in seen_ids:
                raise CorpusError(f"{path}:{lineno}: duplicate triplet id {raw['id']!r}")
            seen_ids.add(raw["id"])
            if known_videos is not None and raw["video_id"] not in known_videos:
                raise CorpusError(
                    f"{path}:{lineno}: video_id {raw['video_id']!r} not in manifest")
            records.append(TripletRecord(**{k: raw[k] for k in REQUIRED_TRIPLET_FIELDS}))
    return records


def write_frame_features(path, matrix: np.ndarray) -> None:
    """Write a [n_frames, dim] matrix as little-endian f32 with the MHVF header."""
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    if arr.ndim != 2:
        raise CorpusError(f"frame features must be 2-D, got shape {arr.shape}")
    n_frames, dim = arr.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<H", FEATURE_VERSION))
        f.write(struct.pack("<I", dim))
        f.write(struct.pack("<I", n_frames))
        f.write(arr.tobytes())


def read_frame_features(path) -> np.ndarray:
    """Read an MHVF file back into a float32 [n_frames, dim] matrix."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if len(magic) != 4 or magic != FEATURE_MAGIC:
            raise FormatError(path, 0, f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
        header = f.read(10)
        if len(header) != 10:
            raise FormatError(path, 4, "truncated header")
        version, dim, n_frames = struct.unpack("<HII", header)
        if version != FEATURE_VERSION:
            raise FormatError(path, 4, f"unsupported version {version}")
        expected = 4 * dim * n_frames
        payload = f.read(expected)
        if len(payload) != expected:
            raise FormatError(path, 14 + len(payload),
                              f"truncated payload: wanted {expected} bytes, "
                              f"got {len(payload)}")
        if f.read(1):
            raise FormatError(path, 14 + expected, "trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(n_frames, dim).copy()


@dataclass
class VideoEntry:
    video_id: str
    feature_path: str
    source_id: str


class Corpus:
    """In-memory corpus view: manifest, triplets, lazily loaded features."""

    def __init__(self, root: Path, videos: dict[str, VideoEntry],
                 triplets: list[TripletRecord]):
        self.root = Path(root)
        self.videos = videos
        self.triplets = triplets
        self._feature_cache: dict[str, np.ndarray] = {}

    @property
    def video_ids(self) -> list[str]:
        return sorted(self.videos)

    def features(self, video_id: str) -> np.ndarray:
        if video_id not in self.videos:
            raise CorpusError(f"unknown video id {video_id!r}")
        if video_id not in self._feature_cache:
            entry = self.videos[video_id]
            self._feature_cache[video_id] = read_frame_features(
                self.root / entry.feature_path)
        return self._feature_cache[video_id]

    def subset(self, video_ids: set[str]) -> "Corpus":
        videos = {vid: self.videos[vid] for vid in video_ids}
        triplets = [t for t in self.triplets if t.video_id in video_ids]
        sub = Corpus(self.root, videos, triplets)
        sub._feature_cache = self._feature_cache  # shared read-only cache
        return sub


def load_corpus(root) -> Corpus:
    root = Path(root)
    manifest_path = root / "manifest.jsonl"
    if not manifest_path.exists():
        raise CorpusError(f"{root}: missing manifest.jsonl")
    videos: dict[str, VideoEntry] = {}
    with open(manifest_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                entry = VideoEntry(raw["video_id"], raw["feature_path"], raw["source_id"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise CorpusError(f"{manifest_path}:{lineno}: bad manifest line: {exc}")
            if entry.video_id in videos:
                raise CorpusError(f"{manifest_path}:{lineno}: duplicate video id "
                                  f"{entry.video_id!r}")
            videos[entry.video_id] = entry
    triplets = load_triplets(root / "triplets.jsonl", known_videos=set(videos))
    return Corpus(root, videos, triplets)


@dataclass
class SyntheticSpec:
    """Knobs for the synthetic corpus generator."""

    n_topics: int = 20
    details_per_topic: int = 5
    videos_per_detail: int = 3
    d_in: int = 64
    noise_sigma: float = 0.1
    n_frames: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.details_per_topic < 2:
            raise CorpusError("need >= 2 details per topic, otherwise the refined "
                              "query cannot disambiguate anything")
        if self.n_topics < 2 or self.videos_per_detail < 1:
            raise CorpusError("need >= 2 topics and >= 1 video per (topic, detail)")
        pool_a, pool_b = _grid_dims(self.n_topics)
        latent_dims = pool_a + pool_b + self.details_per_topic + self.videos_per_detail
        if self.d_in < latent_dims:
            raise CorpusError(f"d_in={self.d_in} too small for {latent_dims} "
                              f"orthonormal latent directions")
        if self.n_frames < 1 or self.noise_sigma < 0:
            raise CorpusError("n_frames must be >= 1 and noise_sigma >= 0")


def _grid_dims(n_topics: int) -> tuple[int, int]:
    """Smallest attribute-pool grid covering n_topics."""
    a = int(np.ceil(np.sqrt(n_topics)))
    b = int(np.ceil(n_topics / a))
    return a, b


def _orthonormal_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Random orthonormal set via QR of a Gaussian matrix."""
    gauss = rng.normal(size=(dim, count))
    q, _ = np.linalg.qr(gauss)
    return np.ascontiguousarray(q.T[:count])


@dataclass
class SyntheticLatents:
    """Ground-truth word bindings for a generated corpus."""

    attribute_a: np.ndarray   # [n_a, d_in]
    attribute_b: np.ndarray   # [n_b, d_in]
    details: np.ndarray       # [n_details, d_in]
    variants: np.ndarray      # [videos_per_detail, d_in]
    word_a: list[str]
    word_b: list[str]
    word_detail: list[str]
    word_variant: list[str]

    def topic_vector(self, ai: int, bj: int) -> np.ndarray:
        v = self.attribute_a[ai] + self.attribute_b[bj]
        return v / np.linalg.norm(v)

    def query_vector(self, text: str) -> np.ndarray:
        """Oracle encoder: sum of the latent vectors bound to known words."""
        acc = np.zeros(self.attribute_a.shape[1])
        for word in text.lower().split():
            if word in self.word_a:
                acc += self.attribute_a[self.word_a.index(word)]
            elif word in self.word_b:
                acc += self.attribute_b[self.word_b.index(word)]
            elif word in self.word_detail:
                acc += self.details[self.word_detail.index(word)]
            elif word in self.word_variant:
                acc += self.variants[self.word_variant.index(word)]
        norm = np.linalg.norm(acc)
        return acc if norm == 0 else acc / norm


def _latents(spec: SyntheticSpec, rng: np.random.Generator) -> SyntheticLatents:
    n_a, n_b = _grid_dims(spec.n_topics)
    count = n_a + n_b + spec.details_per_topic + spec.videos_per_detail
    basis = _orthonormal_rows(rng, count, spec.d_in)
    detail_stop = n_a + n_b + spec.details_per_topic
    return SyntheticLatents(
        attribute_a=basis[:n_a],
        attribute_b=basis[n_a:n_a + n_b],
        details=basis[n_a + n_b:detail_stop],
        variants=basis[detail_stop:],
        word_a=[f"motion{i:02d}" for i in range(n_a)],
        word_b=[f"region{j:02d}" for j in range(n_b)],
        word_detail=[f"detail{k:02d}" for k in range(spec.details_per_topic)],
        word_variant=[f"variant{c}" for c in range(spec.videos_per_detail)],
    )


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir) -> dict:
    """Write a fully deterministic corpus; returns summary counts."""
    spec.validate()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    latents = _latents(spec, rng)
    n_a, _ = _grid_dims(spec.n_topics)

    manifest_lines: list[str] = []
    triplet_lines: list[str] = []
    n_videos = 0
    for topic in range(spec.n_topics):
        ai, bj = topic % n_a, topic // n_a
        word_a, word_b = latents.word_a[ai], latents.word_b[bj]
        source_id = f"topic{topic:03d}"
        topic_vec = latents.attribute_a[ai] + latents.attribute_b[bj]
        for detail in range(spec.details_per_topic):
            word_d = latents.word_detail[detail]
            base = topic_vec + latents.details[detail]
            for copy in range(spec.videos_per_detail):
                word_c = latents.word_variant[copy]
                video_id = f"v{topic:03d}_{detail}_{copy}"
                noise = rng.normal(size=(spec.n_frames, spec.d_in)) * spec.noise_sigma
                frames = (base[None, :] + latents.variants[copy][None, :]
                          + noise).astype(np.float32)
                feature_path = f"features/{video_id}.mhvf"
                write_frame_features(out / feature_path, frames)
                manifest_lines.append(json.dumps(
                    {"video_id": video_id, "feature_path": feature_path,
                     "source_id": source_id}, separators=(",", ":")))
                triplet_lines.append(json.dumps({
                    "id": f"t{n_videos:05d}",
                    "video_id": video_id,
                    "q1": f"how to {word_a} {word_b}",
                    "d_v": f"Shows {word_a} {word_b} focusing on {word_d} {word_c}.",
                    "q2": f"{word_a} with {word_d} {word_c}",
                    "source_id": source_id,
                }, separators=(",", ":")))
                n_videos += 1

    (out / "manifest.jsonl").write_text("\n".join(manifest_lines) + "\n", encoding="utf-8")
    (out / "triplets.jsonl").write_text("\n".join(triplet_lines) + "\n", encoding="utf-8")
    (out / "latents.json").write_text(json.dumps({
        "attribute_a": latents.attribute_a.tolist(),
        "attribute_b": latents.attribute_b.tolist(),
        "details": latents.details.tolist(),
        "variants": latents.variants.tolist(),
        "word_a": latents.word_a,
        "word_b": latents.word_b,
        "word_detail": latents.word_detail,
        "word_variant": latents.word_variant,
    }, separators=(",", ":")), encoding="utf-8")
    return {
        "videos": n_videos,
        "triplets": n_videos,
        "sources": spec.n_topics,
        "d_in": spec.d_in,
        "n_frames": spec.n_frames,
    }


def load_latents(root) -> SyntheticLatents:
    raw = json.loads((Path(root) / "latents.json").read_text(encoding="utf-8"))
    return SyntheticLatents(
        attribute_a=np.array(raw["attribute_a"]),
        attribute_b=np.array(raw["attribute_b"]),
        details=np.array(raw["details"]),
        variants=np.array(raw["variants"]),
        word_a=raw["word_a"],
        word_b=raw["word_b"],
        word_detail=raw["word_detail"],
        word_variant=raw["word_variant"],
    )


@dataclass
class ValidationReport:
    videos: int = 0
    triplets: int = 0
    sources: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"videos": self.videos, "triplets": self.triplets,
                "sources": self.sources, "ok": self.ok,
                "violations": self.violations}


def validate_corpus(root) -> ValidationReport:
    """Audit a corpus directory; never raises, reports violations instead."""
    root = Path(root)
    report = ValidationReport()
    try:
        corpus = load_corpus(root)
    except (CorpusError, FormatError, OSError) as exc:
        report.violations.append(str(exc))
        return report
    report.videos = len(corpus.videos)
    report.triplets = len(corpus.triplets)
    sources = {v.source_id for v in corpus.videos.values()}
    report.sources = len(sources)

    shapes = set()
    for vid, entry in sorted(corpus.videos.items()):
        path = root / entry.feature_path
        if not path.exists():
            report.violations.append(f"{vid}: missing feature file {entry.feature_path}")
            continue
        try:
            feats = read_frame_features(path)
        except FormatError as exc:
            report.violations.append(str(exc))
            continue
        shapes.add(feats.shape)
        if not np.all(np.isfinite(feats)):
            report.violations.append(f"{vid}: non-finite frame features")
    if len(shapes) > 1:
        report.violations.append(f"inconsistent feature shapes: {sorted(shapes)}")
    referenced = {t.video_id for t in corpus.triplets}
    orphans = sorted(set(corpus.videos) - referenced)
    if orphans:
        report.violations.append(f"{len(orphans)} videos lack triplets, e.g. {orphans[:3]}")
    if len(sources) < 2:
        report.violations.append("fewer than 2 sources: grouped split infeasible")
    return report
