import math

import numpy as np
import pytest
from scipy import stats

from datr import autodiff as ad
from datr import data
from datr import retrieval as rt
from datr import training as tr
from datr.model import Model, ModelConfig, Vocabulary, named_parameters
from gradcheck import sampled_central_difference


def unit_batch(rows):
    arr = np.asarray(rows, dtype=np.float64)
    return ad.Tensor(arr / np.linalg.norm(arr, axis=1, keepdims=True))


SMALL_MODEL = dict(embed_dim=16, heads=2, video_layers=2, n_frames=4,
                   frame_feature_dim=12, text_layers=1, max_tokens=8)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus") / "c"
    spec = data.SyntheticSpec(n_topics=4, details_per_topic=3, videos_per_detail=2,
                              d_in=12, n_frames=4, noise_sigma=0.05, seed=0)
    data.generate_synthetic_corpus(spec, root)
    return data.load_corpus(root)


class TestClipLoss:
    def test_single_pair_is_zero(self):
        z = unit_batch([[1.0, 0.0]])
        loss = tr.clip_loss(z, z, ad.Tensor(1.0))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_value_two_orthogonal_pairs(self):
        z = unit_batch([[1.0, 0.0], [0.0, 1.0]])
        loss = tr.clip_loss(z, z, ad.Tensor(1.0))
        assert loss.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-4)

    def test_t2v_only_mode(self):
        rng = np.random.default_rng(0)
        zt, zv = unit_batch(rng.normal(size=(5, 8))), unit_batch(rng.normal(size=(5, 8)))
        tau = ad.Tensor(0.3)
        sims = zt.data @ zv.data.T / 0.3
        shifted = sims - sims.max(axis=1, keepdims=True)
        log_soft = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expect = -np.diagonal(log_soft).mean()
        assert tr.clip_loss(zt, zv, tau, mode="t2v").item() == pytest.approx(expect)

    def test_nonnegative_random_batches(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            b, d = int(rng.integers(1, 9)), int(rng.integers(2, 12))
            zt = unit_batch(rng.normal(size=(b, d)))
            zv = unit_batch(rng.normal(size=(b, d)))
            assert tr.clip_loss(zt, zv, ad.Tensor(0.2)).item() >= -1e-12

    def test_permutation_symmetry(self):
        rng = np.random.default_rng(9)
        zt, zv = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
        perm = rng.permutation(6)
        a = tr.clip_loss(unit_batch(zt), unit_batch(zv), ad.Tensor(0.5)).item()
        b = tr.clip_loss(unit_batch(zt[perm]), unit_batch(zv[perm]),
                         ad.Tensor(0.5)).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_tau_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        zt = unit_batch(rng.normal(size=(4, 6)))
        zv = unit_batch(rng.normal(size=(4, 6)))
        log_tau = ad.Tensor(np.asarray(math.log(0.07)), requires_grad=True)
        with ad.Tape() as tape:
            tau = ad.clamp(ad.exp(log_tau), 1e-3, 100.0)
            loss = tr.clip_loss(zt, zv, tau)
        tape.backward(loss)

        def forward():
            t = ad.clamp(ad.exp(ad.Tensor(log_tau.data.copy())), 1e-3, 100.0)
            return float(tr.clip_loss(zt, zv, t).data)

        numeric = sampled_central_difference(forward, log_tau.data, [0])
        rel = abs(float(log_tau.grad) - numeric[0]) / max(abs(numeric[0]), 1.0)
        assert rel < 1e-4


class TestTrainStage1:
    def test_zero_epochs_returns_initialization(self, small_corpus):
        cfg = tr.TrainConfig(batch_size=4, epochs=0, seed=3)
        model, report = tr.train_stage1(small_corpus, cfg, ModelConfig(**SMALL_MODEL))
        vocab = Vocabulary.build([t.q1 for t in small_corpus.triplets]
                                 + [t.q2 for t in small_corpus.triplets])
        fresh = Model.initialize(ModelConfig(**SMALL_MODEL), vocab, seed=3)
        for name, t in named_parameters(model.params).items():
            assert t.data.tobytes() == named_parameters(fresh.params)[name].data.tobytes()
        assert report.loss_curve == []

    def test_loss_decreases_and_tau_in_bounds(self, small_corpus):
        cfg = tr.TrainConfig(batch_size=8, epochs=6, seed=0)
        model, report = tr.train_stage1(small_corpus, cfg, ModelConfig(**SMALL_MODEL),
                                        val_corpus=small_corpus)
        assert report.loss_curve[-1] < report.loss_curve[0]
        assert report.val_loss_curve[-1] < report.val_loss_curve[0]
        assert 1e-3 <= report.final_tau <= 100.0

    def test_same_seed_identical_curves(self, small_corpus):
        cfg = tr.TrainConfig(batch_size=8, epochs=2, seed=5)
        _, r1 = tr.train_stage1(small_corpus, cfg, ModelConfig(**SMALL_MODEL))
        _, r2 = tr.train_stage1(small_corpus, cfg, ModelConfig(**SMALL_MODEL))
        assert r1.loss_curve == r2.loss_curve

    def test_batch_size_one_rejected(self, small_corpus):
        with pytest.raises(tr.TrainingError, match="batch_size"):
            tr.TrainConfig(batch_size=1).validate()


class TestHardNegatives:
    @pytest.fixture()
    def trained(self, small_corpus):
        cfg = tr.TrainConfig(batch_size=8, epochs=1, seed=1)
        model, _ = tr.train_stage1(small_corpus, cfg, ModelConfig(**SMALL_MODEL))
        index = rt.build_index(small_corpus, model)
        return model, index

    def test_small_corpus_truncates(self, trained, small_corpus):
        model, index = trained
        tiny_ids = set(index.ids[:3])
        tiny = rt.EmbeddingIndex(
            [i for i in index.ids if i in tiny_ids],
            np.stack([index.row(i) for i in sorted(tiny_ids)]), b"\x00" * 32)
        triplet = next(t for t in small_corpus.triplets if t.video_id in tiny_ids)
        negs = tr.mine_hard_negatives(triplet, tiny, model, 7)
        assert len(negs) == 2 and triplet.video_id not in negs

    def test_positive_first_negatives_follow(self, trained, small_corpus):
        model, index = trained
        for triplet in small_corpus.triplets[:6]:
            pool = rt.stage1_retrieve(triplet.q1, model, index, 8)
            negs = tr.mine_hard_negatives(triplet, index, model, 7)
            if pool.ids[0] == triplet.video_id:
                assert negs == pool.ids[1:8]

    def test_matches_brute_force_cosine_ranking(self, trained, small_corpus):
        model, index = trained
        triplet = small_corpus.triplets[5]
        z = model.encode_text(triplet.q1).data
        scores = index.matrix @ z
        order = sorted(range(index.size), key=lambda i: (-scores[i], index.ids[i]))
        expected = [index.ids[i] for i in order if index.ids[i] != triplet.video_id][:7]
        assert tr.mine_hard_negatives(triplet, index, model, 7) == expected


class TestTrainStage2:
    def test_hinge_zero_when_separated(self):
        # margin 0.2 satisfied: max(0, 0.2 - 1.0 + 0.5) == 0
        margin, s_pos, s_neg = ad.Tensor(0.2), ad.Tensor(1.0), ad.Tensor(0.5)
        hinge = ad.relu(ad.add(ad.sub(margin, s_pos), s_neg))
        assert hinge.item() == 0.0

    def test_margin_trend_and_frozen_encoders(self, small_corpus):
        cfg1 = tr.TrainConfig(batch_size=8, epochs=4, seed=0)
        model, _ = tr.train_stage1(small_corpus, cfg1, ModelConfig(**SMALL_MODEL))
        before = {n: t.data.copy() for n, t in named_parameters(model.params).items()
                  if not n.startswith("fusion.")}
        cfg2 = tr.TrainConfig(batch_size=8, epochs=10, seed=0,
                              hard_negatives_per_positive=4)
        report, _ = tr.train_stage2(small_corpus, model, cfg2)
        rho, _ = stats.spearmanr(range(len(report.margin_curve)), report.margin_curve)
        assert rho > 0
        for name, arr in before.items():
            now = named_parameters(model.params)[name].data
            assert now.tobytes() == arr.tobytes(), f"{name} changed during stage II"

    def test_untrained_reranker_still_permutes_candidates(self, small_corpus):
        cfg = tr.TrainConfig(batch_size=8, epochs=1, seed=2)
        model, _ = tr.train_stage1(small_corpus, cfg, ModelConfig(**SMALL_MODEL))
        index = rt.build_index(small_corpus, model)
        session = rt.SessionState("s")
        pipe = rt.PipelineConfig(k=10, m=10)
        t = small_corpus.triplets[0]
        rt.run_pipeline(session, t.q1, model, index, pipe)
        out = rt.run_pipeline(session, t.q2, model, index, pipe)
        assert sorted(out.ids) == sorted(session.last_candidates.ids[:10])

    def test_same_seed_identical_curves(self, small_corpus):
        cfg1 = tr.TrainConfig(batch_size=8, epochs=2, seed=7)
        model_a, _ = tr.train_stage1(small_corpus, cfg1, ModelConfig(**SMALL_MODEL))
        model_b, _ = tr.train_stage1(small_corpus, cfg1, ModelConfig(**SMALL_MODEL))
        cfg2 = tr.TrainConfig(batch_size=8, epochs=3, seed=7)
        ra, _ = tr.train_stage2(small_corpus, model_a, cfg2)
        rb, _ = tr.train_stage2(small_corpus, model_b, cfg2)
        assert ra.loss_curve == rb.loss_curve
        assert ra.margin_curve == rb.margin_curve
