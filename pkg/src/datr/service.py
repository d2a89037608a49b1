"""HTTP session service for interactive multi-turn retrieval.

All handlers read one immutable snapshot (model + index + video metadata);
swapping in a retrained snapshot is a single attribute assignment, so no
response ever mixes two snapshots. Sessions live in memory with TTL
eviction and are serialized per session id: concurrent turns on one session
queue up, concurrent sessions never share state.

Response bodies are pure functions of (snapshot, session transcript,
request): no timestamps, no randomness beyond the unguessable session id.
"""

from __future__ import annotations

import secrets
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Optional

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from datr import checkpoint as ckpt
from datr.data import load_corpus
from datr.model import FUSION_MODES
from datr.retrieval import (EmbeddingIndex, PipelineConfig, RankedList,
                            SessionState, run_pipeline)


@dataclass
class ServiceConfig:
    checkpoint_path: str = ""
    index_path: str = ""
    corpus_dir: str = ""
    port: int = 8080
    k: int = 100
    m: int = 10
    stage2: bool = True
    fusion_mode: str = "full"
    session_ttl_seconds: float = 3600.0

    def validate(self) -> None:
        if not (self.k >= self.m >= 1):
            raise ValueError(f"need k >= m >= 1, got k={self.k}, m={self.m}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.session_ttl_seconds <= 0:
            raise ValueError("session_ttl_seconds must be positive")


@dataclass
class Snapshot:
    """Immutable bundle every request reads exactly once."""

    model: object
    index: EmbeddingIndex
    video_meta: dict[str, dict]
    config: ServiceConfig


@dataclass
class _SessionRecord:
    state: SessionState
    lock: threading.Lock
    expires_at: float
    transcript: list[dict] = field(default_factory=list)


class TurnRequest(BaseModel):
    query: str
    overrides: Optional[dict] = None


def build_snapshot(config: ServiceConfig) -> Snapshot:
    config.validate()
    model = ckpt.load_model(config.checkpoint_path)
    index = EmbeddingIndex.load(config.index_path)
    video_meta: dict[str, dict] = {}
    if config.corpus_dir:
        corpus = load_corpus(config.corpus_dir)
        described = {}
        for t in corpus.triplets:
            described.setdefault(t.video_id, t.d_v)
        for vid, entry in corpus.videos.items():
            video_meta[vid] = {
                "video_id": vid,
                "source_id": entry.source_id,
                "n_frames": model.config.n_frames,
                "dim": model.config.frame_feature_dim,
                "d_v": described.get(vid, ""),
            }
    return Snapshot(model=model, index=index, video_meta=video_meta, config=config)


def _merge_overrides(base: ServiceConfig, overrides: Optional[dict]) -> PipelineConfig:
    k, m = base.k, base.m
    stage2, fusion_mode = base.stage2, base.fusion_mode
    if overrides:
        unknown = set(overrides) - {"k", "m", "stage2", "fusion_mode"}
        if unknown:
            raise HTTPException(400, f"unknown override keys: {sorted(unknown)}")
        try:
            k = int(overrides.get("k", k))
            m = int(overrides.get("m", m))
        except (TypeError, ValueError):
            raise HTTPException(400, "k and m overrides must be integers")
        stage2 = overrides.get("stage2", stage2)
        if not isinstance(stage2, bool):
            raise HTTPException(400, "stage2 override must be a boolean")
        fusion_mode = overrides.get("fusion_mode", fusion_mode)
    if fusion_mode not in FUSION_MODES:
        raise HTTPException(400, f"fusion_mode must be one of {FUSION_MODES}")
    if not (k >= m >= 1):
        raise HTTPException(400, f"need k >= m >= 1, got k={k}, m={m}")
    return PipelineConfig(k=k, m=m, stage2=stage2, fusion_mode=fusion_mode)


def _results_payload(results: RankedList, candidates: RankedList) -> list[dict]:
    stage1_rank = {e.video_id: i + 1 for i, e in enumerate(candidates.entries)}
    payload = []
    for rank, e in enumerate(results.entries, start=1):
        item = {
            "video_id": e.video_id,
            "stage1_score": e.stage1_score,
            "final_rank": rank,
            "stage1_rank": stage1_rank[e.video_id],
        }
        if e.stage2_score is not None:
            item["stage2_score"] = e.stage2_score
        payload.append(item)
    return payload


def create_app(config: ServiceConfig, preload: bool = True) -> FastAPI:
    app = FastAPI(title="datr", docs_url=None, redoc_url=None)
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    app.state.snapshot = None
    app.state.sessions = {}
    app.state.sessions_lock = threading.Lock()
    if preload:
        app.state.snapshot = build_snapshot(config)

    def snapshot() -> Snapshot:
        snap = app.state.snapshot
        if snap is None:
            raise HTTPException(503, "index and model not loaded yet")
        return snap

    def session_record(session_id: str) -> _SessionRecord:
        now = time.monotonic()
        with app.state.sessions_lock:
            record = app.state.sessions.get(session_id)
            if record is None:
                raise HTTPException(404, f"unknown session {session_id}")
            if now > record.expires_at:
                del app.state.sessions[session_id]
                raise HTTPException(410, f"session {session_id} expired")
            return record

    @app.post("/v1/sessions", status_code=201)
    def create_session():
        snap = snapshot()
        session_id = secrets.token_urlsafe(16)
        record = _SessionRecord(
            state=SessionState(session_id=session_id),
            lock=threading.Lock(),
            expires_at=time.monotonic() + snap.config.session_ttl_seconds,
        )
        with app.state.sessions_lock:
            now = time.monotonic()
            expired = [sid for sid, r in app.state.sessions.items()
                       if now > r.expires_at]
            for sid in expired:
                del app.state.sessions[sid]
            app.state.sessions[session_id] = record
        return {"session_id": session_id}

    @app.post("/v1/sessions/{session_id}/turns")
    def post_turn(session_id: str, request: TurnRequest):
        snap = snapshot()
        record = session_record(session_id)
        if not request.query.strip():
            raise HTTPException(400, "empty query")
        pipeline = _merge_overrides(snap.config, request.overrides)
        with record.lock:
            results = run_pipeline(record.state, request.query, snap.model,
                                   snap.index, pipeline)
            candidates = record.state.last_candidates
            turn = len(record.state.turns)
            body = {
                "session_id": session_id,
                "turn": turn,
                "query": request.query,
                "config": {"k": pipeline.k, "m": pipeline.m,
                           "stage2": pipeline.stage2,
                           "fusion_mode": pipeline.fusion_mode},
                "results": _results_payload(results, candidates),
                "clamped": results.clamped,
            }
            if turn >= 2:
                body["stage1_results"] = [
                    {"video_id": e.video_id, "stage1_score": e.stage1_score,
                     "rank": i + 1}
                    for i, e in enumerate(candidates.entries[:pipeline.m])
                ]
            record.transcript.append(body)
            record.expires_at = time.monotonic() + snap.config.session_ttl_seconds
            return body

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str):
        record = session_record(session_id)
        with record.lock:
            return {"session_id": session_id, "turns": list(record.transcript)}

    @app.get("/v1/videos/{video_id}")
    def get_video(video_id: str):
        snap = snapshot()
        meta = snap.video_meta.get(video_id)
        if meta is None:
            raise HTTPException(404, f"unknown video {video_id}")
        return meta

    @app.get("/v1/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/v1/config")
    def get_config():
        snap = snapshot()
        cfg = snap.config
        return {
            "k": cfg.k,
            "m": cfg.m,
            "stage2": cfg.stage2,
            "fusion_mode": cfg.fusion_mode,
            "session_ttl_seconds": cfg.session_ttl_seconds,
            "index_size": snap.index.size,
            "embed_dim": snap.model.config.embed_dim,
        }

    return app


def load_snapshot(app: FastAPI, config: ServiceConfig) -> None:
    """Build and atomically install a fresh snapshot (in-flight requests
    keep the one they already captured)."""
    app.state.snapshot = build_snapshot(config)
