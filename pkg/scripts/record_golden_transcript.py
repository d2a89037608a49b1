#!/usr/bin/env python3
"""Record the frontend's golden fixtures from a live in-process service.

Builds a small deterministic corpus and a seeded checkpoint, serves them,
replays a three-turn session (the third turn disables stage II via an
override), and writes the response bodies plus video metadata to
frontend/test/fixtures/. Committed fixtures keep the frontend snapshot
tests independent of the Python stack.
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

from fastapi.testclient import TestClient

from datr import checkpoint as ckpt
from datr import data
from datr import retrieval as rt
from datr import service as sv
from datr.model import Model, ModelConfig, Vocabulary

FIXTURES = Path(__file__).resolve().parent.parent / "frontend" / "test" / "fixtures"


def main() -> int:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        corpus_dir = root / "corpus"
        spec = data.SyntheticSpec(n_topics=4, details_per_topic=3,
                                  videos_per_detail=2, d_in=12, n_frames=4,
                                  noise_sigma=0.05, seed=7)
        data.generate_synthetic_corpus(spec, corpus_dir)
        corpus = data.load_corpus(corpus_dir)
        vocab = Vocabulary.build([t.q1 for t in corpus.triplets]
                                 + [t.q2 for t in corpus.triplets])
        config = ModelConfig(embed_dim=16, heads=2, video_layers=2, n_frames=4,
                             frame_feature_dim=12, text_layers=1, max_tokens=8)
        model = Model.initialize(config, vocab, seed=0)
        ckpt_path = root / "model.ckpt"
        ckpt.save_model(model, ckpt_path)
        index = rt.build_index(corpus, model, ckpt.file_sha256(ckpt_path))
        index_path = root / "videos.index"
        index.save(index_path)

        service_config = sv.ServiceConfig(
            checkpoint_path=str(ckpt_path), index_path=str(index_path),
            corpus_dir=str(corpus_dir), k=12, m=5)
        app = sv.create_app(service_config)

        t = corpus.triplets[0]
        turns = [
            {"query": t.q1},
            {"query": t.q2},
            {"query": t.q2, "overrides": {"stage2": False}},
        ]
        with TestClient(app) as client:
            sid = client.post("/v1/sessions").json()["session_id"]
            bodies = []
            for payload in turns:
                resp = client.post(f"/v1/sessions/{sid}/turns", json=payload)
                resp.raise_for_status()
                body = resp.json()
                body["session_id"] = "golden-session"  # fixture-stable id
                bodies.append(body)
            video_ids = {r["video_id"] for b in bodies for r in b["results"]}
            videos = {vid: client.get(f"/v1/videos/{vid}").json()
                      for vid in sorted(video_ids)}
            service_cfg = client.get("/v1/config").json()

    (FIXTURES / "transcript.json").write_text(
        json.dumps({"turns": bodies, "videos": videos, "config": service_cfg},
                   indent=2, sort_keys=True) + "\n")
    print(f"wrote {FIXTURES / 'transcript.json'} "
          f"({len(bodies)} turns, {len(videos)} videos)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
