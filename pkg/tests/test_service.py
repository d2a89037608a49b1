import json
from concurrent.futures import ThreadPoolExecutor

import pytest
from fastapi.testclient import TestClient

from datr import checkpoint as ckpt
from datr import data
from datr import retrieval as rt
from datr import service as sv
from datr.model import Model, ModelConfig, Vocabulary


@pytest.fixture(scope="module")
def service_paths(tmp_path_factory):
    """Deterministic tiny corpus + seeded (untrained) checkpoint + index."""
    root = tmp_path_factory.mktemp("svc")
    corpus_dir = root / "corpus"
    spec = data.SyntheticSpec(n_topics=4, details_per_topic=3, videos_per_detail=2,
                              d_in=12, n_frames=4, noise_sigma=0.05, seed=7)
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
    return {
        "corpus": corpus,
        "config": sv.ServiceConfig(checkpoint_path=str(ckpt_path),
                                   index_path=str(index_path),
                                   corpus_dir=str(corpus_dir),
                                   k=12, m=5),
    }


@pytest.fixture()
def client(service_paths):
    app = sv.create_app(service_paths["config"])
    with TestClient(app) as c:
        yield c


def three_turn_queries(corpus):
    t = corpus.triplets[0]
    return [t.q1, t.q2, t.q2 + " please"]


class TestLifecycle:
    def test_create_session(self, client):
        resp = client.post("/v1/sessions")
        assert resp.status_code == 201 and "session_id" in resp.json()

    def test_two_creates_distinct(self, client):
        a = client.post("/v1/sessions").json()["session_id"]
        b = client.post("/v1/sessions").json()["session_id"]
        assert a != b

    def test_503_before_load(self, service_paths):
        app = sv.create_app(service_paths["config"], preload=False)
        with TestClient(app) as c:
            assert c.post("/v1/sessions").status_code == 503
            assert c.get("/v1/config").status_code == 503
            sv.load_snapshot(app, service_paths["config"])
            assert c.post("/v1/sessions").status_code == 201

    def test_healthz(self, client):
        resp = client.get("/v1/healthz")
        assert resp.status_code == 200 and resp.json() == {"status": "ok"}

    def test_config_echoes_defaults(self, client):
        body = client.get("/v1/config").json()
        assert body["k"] == 12 and body["m"] == 5 and body["stage2"] is True

    def test_expired_session_410(self, service_paths):
        cfg = sv.ServiceConfig(**{**service_paths["config"].__dict__,
                                  "session_ttl_seconds": 1e-9})
        app = sv.create_app(cfg)
        with TestClient(app) as c:
            sid = c.post("/v1/sessions").json()["session_id"]
            resp = c.post(f"/v1/sessions/{sid}/turns", json={"query": "x"})
            assert resp.status_code == 410


class TestTurns:
    def test_turn1_no_stage2_scores(self, client, service_paths):
        q1 = three_turn_queries(service_paths["corpus"])[0]
        sid = client.post("/v1/sessions").json()["session_id"]
        body = client.post(f"/v1/sessions/{sid}/turns", json={"query": q1}).json()
        assert body["turn"] == 1 and len(body["results"]) == 5
        assert all("stage2_score" not in r for r in body["results"])
        assert "stage1_results" not in body
        assert [r["final_rank"] for r in body["results"]] == [1, 2, 3, 4, 5]

    def test_turn2_includes_both_orders(self, client, service_paths):
        q1, q2, _ = three_turn_queries(service_paths["corpus"])
        sid = client.post("/v1/sessions").json()["session_id"]
        client.post(f"/v1/sessions/{sid}/turns", json={"query": q1})
        body = client.post(f"/v1/sessions/{sid}/turns", json={"query": q2}).json()
        assert body["turn"] == 2
        assert all("stage2_score" in r for r in body["results"])
        assert len(body["stage1_results"]) == 5
        assert set(r["video_id"] for r in body["results"])

    def test_turn2_stage2_off_override(self, client, service_paths):
        q1, q2, _ = three_turn_queries(service_paths["corpus"])
        sid = client.post("/v1/sessions").json()["session_id"]
        first = client.post(f"/v1/sessions/{sid}/turns", json={"query": q1}).json()
        body = client.post(f"/v1/sessions/{sid}/turns",
                           json={"query": q2,
                                 "overrides": {"stage2": False}}).json()
        assert body["config"]["stage2"] is False
        assert [r["video_id"] for r in body["results"]] == \
               [r["video_id"] for r in first["results"]]
        assert all("stage2_score" not in r for r in body["results"])

    def test_matches_pipeline_oracle(self, client, service_paths):
        q1, q2, _ = three_turn_queries(service_paths["corpus"])
        cfg = service_paths["config"]
        model = ckpt.load_model(cfg.checkpoint_path)
        index = rt.EmbeddingIndex.load(cfg.index_path)
        session = rt.SessionState("oracle")
        pipe = rt.PipelineConfig(k=cfg.k, m=cfg.m)
        rt.run_pipeline(session, q1, model, index, pipe)
        expect = rt.run_pipeline(session, q2, model, index, pipe)

        sid = client.post("/v1/sessions").json()["session_id"]
        client.post(f"/v1/sessions/{sid}/turns", json={"query": q1})
        body = client.post(f"/v1/sessions/{sid}/turns", json={"query": q2}).json()
        assert [r["video_id"] for r in body["results"]] == expect.ids
        for r, e in zip(body["results"], expect.entries):
            assert r["stage2_score"] == pytest.approx(e.stage2_score, abs=1e-12)

    def test_errors(self, client):
        sid = client.post("/v1/sessions").json()["session_id"]
        assert client.post(f"/v1/sessions/{sid}/turns",
                           json={"query": "  "}).status_code == 400
        assert client.post("/v1/sessions/nope/turns",
                           json={"query": "x"}).status_code == 404
        assert client.post(f"/v1/sessions/{sid}/turns",
                           json={"query": "x",
                                 "overrides": {"k": 1, "m": 5}}).status_code == 400
        assert client.post(f"/v1/sessions/{sid}/turns",
                           json={"query": "x",
                                 "overrides": {"bogus": 1}}).status_code == 400

    def test_transcript_endpoint(self, client, service_paths):
        q1, q2, _ = three_turn_queries(service_paths["corpus"])
        sid = client.post("/v1/sessions").json()["session_id"]
        b1 = client.post(f"/v1/sessions/{sid}/turns", json={"query": q1}).json()
        b2 = client.post(f"/v1/sessions/{sid}/turns", json={"query": q2}).json()
        transcript = client.get(f"/v1/sessions/{sid}").json()
        assert transcript["turns"] == [b1, b2]
        assert client.get("/v1/sessions/zzz").status_code == 404


class TestVideos:
    def test_metadata_with_description(self, client, service_paths):
        t = service_paths["corpus"].triplets[0]
        body = client.get(f"/v1/videos/{t.video_id}").json()
        assert body["video_id"] == t.video_id
        assert body["source_id"] == t.source_id
        assert body["d_v"] == t.d_v
        assert body["n_frames"] == 4 and body["dim"] == 12

    def test_unknown_video_404(self, client):
        assert client.get("/v1/videos/ghost").status_code == 404


class TestReplayAndConcurrency:
    def test_golden_transcript_replay_byte_exact(self, service_paths):
        queries = three_turn_queries(service_paths["corpus"])

        def record(client):
            sid = client.post("/v1/sessions").json()["session_id"]
            bodies = []
            for q in queries:
                resp = client.post(f"/v1/sessions/{sid}/turns", json={"query": q})
                assert resp.status_code == 200
                body = resp.json()
                body.pop("session_id")
                bodies.append(json.dumps(body, sort_keys=True))
            return bodies

        with TestClient(sv.create_app(service_paths["config"])) as c1:
            golden = record(c1)
        with TestClient(sv.create_app(service_paths["config"])) as c2:
            replay = record(c2)
        assert golden == replay

    def test_concurrent_sessions_match_serial(self, service_paths):
        corpus = service_paths["corpus"]
        scripts = []
        for t in corpus.triplets[:16]:
            scripts.append([t.q1, t.q2])

        def run_script(client, script):
            sid = client.post("/v1/sessions").json()["session_id"]
            out = []
            for q in script:
                body = client.post(f"/v1/sessions/{sid}/turns",
                                   json={"query": q}).json()
                body.pop("session_id")
                out.append(json.dumps(body, sort_keys=True))
            return out

        app = sv.create_app(service_paths["config"])
        with TestClient(app) as client:
            serial = [run_script(client, s) for s in scripts]
            with ThreadPoolExecutor(max_workers=16) as pool:
                parallel = list(pool.map(lambda s: run_script(client, s), scripts))
        assert serial == parallel

    def test_turns_on_one_session_serialized(self, service_paths):
        corpus = service_paths["corpus"]
        q = corpus.triplets[0].q1
        app = sv.create_app(service_paths["config"])
        with TestClient(app) as client:
            sid = client.post("/v1/sessions").json()["session_id"]
            with ThreadPoolExecutor(max_workers=8) as pool:
                bodies = list(pool.map(
                    lambda _: client.post(f"/v1/sessions/{sid}/turns",
                                          json={"query": q}).json(), range(8)))
        turns = sorted(b["turn"] for b in bodies)
        assert turns == list(range(1, 9))  # every request observed a distinct turn
