"""Two training phases over the synthetic (or any format-compatible) corpus.

Stage I fits both encoders and the temperature with the bidirectional
in-batch contrastive loss: row i of a batch is a positive text/video pair and
every other row serves as a negative in the softmax, in both directions.

Stage II freezes the encoders, mines hard negatives from the stage-I
candidate pool, and fits the fusion MLP and cross-encoder scorer with a
margin ranking loss over (fused query, positive, hard negative) triples.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from datr import autodiff as ad
from datr.autodiff import Tape, Tensor
from datr.data import Corpus, TripletRecord
from datr.model import (Model, ModelConfig, Vocabulary, named_parameters,
                        stage1_parameter_names, stage2_parameter_names)
from datr.retrieval import EmbeddingIndex, build_index, stage1_retrieve

LOSS_MODES = ("bidirectional", "t2v")


class TrainingError(RuntimeError):
    """Contract violation or divergence during training."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    hard_negatives_per_positive: int = 7
    stage2_margin: float = 0.2
    stage2_query_jitter: float = 0.0     # embedding-space augmentation, stage II only
    stage2_negatives_per_step: int = 0   # subsample the mined pool per step; 0 = all
    loss_mode: str = "bidirectional"
    fusion_mode: str = "full"

    def validate(self) -> None:
        if self.batch_size < 2:
            raise TrainingError("contrastive training needs batch_size >= 2 "
                                "(a single-pair batch has zero loss)")
        if self.epochs < 0:
            raise TrainingError("epochs must be >= 0")
        for name in ("learning_rate", "adam_beta1", "adam_beta2", "adam_eps",
                     "stage2_margin"):
            if getattr(self, name) <= 0:
                raise TrainingError(f"{name} must be > 0")
        if self.stage2_query_jitter < 0:
            raise TrainingError("stage2_query_jitter must be >= 0")
        if self.stage2_negatives_per_step < 0:
            raise TrainingError("stage2_negatives_per_step must be >= 0")
        if self.loss_mode not in LOSS_MODES:
            raise TrainingError(f"loss_mode must be one of {LOSS_MODES}")


@dataclass
class TrainReport:
    stage: str
    seed: int
    epochs: int
    batch_size: int
    loss_curve: list[float] = field(default_factory=list)
    val_loss_curve: Optional[list[float]] = None
    margin_curve: Optional[list[float]] = None
    final_tau: Optional[float] = None
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "seed": self.seed,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "loss_curve": self.loss_curve,
            "val_loss_curve": self.val_loss_curve,
            "margin_curve": self.margin_curve,
            "final_tau": self.final_tau,
            "wall_clock_seconds": self.wall_clock_seconds,
        }


def desk_stage1_config(seed: int = 0, **overrides) -> TrainConfig:
    """Stage-I defaults tuned for the desk-scale synthetic corpus."""
    base = dict(batch_size=32, epochs=10, learning_rate=1e-3, seed=seed)
    base.update(overrides)
    return TrainConfig(**base)


def desk_stage2_config(seed: int = 0, **overrides) -> TrainConfig:
    """Stage-II defaults: small MLPs on cached embeddings tolerate a higher
    rate, and deep negative pools keep full-corpus re-scoring calibrated."""
    base = dict(batch_size=32, epochs=50, learning_rate=1e-2, seed=seed,
                hard_negatives_per_positive=80)
    base.update(overrides)
    return TrainConfig(**base)


class Adam:
    """Standard Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float,
                 beta2: float, eps: float):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_loss(z_text: Tensor, z_video: Tensor, tau: Tensor,
              mode: str = "bidirectional") -> Tensor:
    """Symmetric in-batch contrastive loss over aligned unit-vector batches.

    Row i of both batches is a positive pair; off-diagonal entries of the
    similarity matrix act as negatives. ``mode="t2v"`` keeps only the
    text-to-video direction (ablation).
    """
    if mode not in LOSS_MODES:
        raise TrainingError(f"mode must be one of {LOSS_MODES}")
    if z_text.ndim != 2 or z_text.shape != z_video.shape:
        raise ad.ShapeError(
            f"aligned [B, d] batches required, got {z_text.shape} and {z_video.shape}")
    if z_text.shape[0] < 1:
        raise TrainingError("contrastive loss needs at least one pair")
    similarities = ad.matmul(z_text, ad.transpose(z_video))
    logits = ad.div(similarities, tau)
    t2v = ad.mul(ad.mean_all(ad.diag_part(ad.log_softmax_rows(logits))),
                 ad.Tensor(-1.0, dtype=logits.dtype))
    if mode == "t2v":
        return t2v
    v2t = ad.mul(ad.mean_all(ad.diag_part(ad.log_softmax_rows(ad.transpose(logits)))),
                 ad.Tensor(-1.0, dtype=logits.dtype))
    return ad.mul(ad.add(t2v, v2t), ad.Tensor(0.5, dtype=logits.dtype))


def _check_finite_loss(loss: Tensor, stage: str, epoch: int, step: int) -> None:
    if not np.isfinite(loss.data):
        raise TrainingError(
            f"{stage}: non-finite loss {float(loss.data)!r} at epoch {epoch}, "
            f"step {step}; aborting")


def _batch_loss(model: Model, batch: list[TripletRecord], corpus: Corpus,
                mode: str) -> Tensor:
    texts = [model.encode_text(t.q1) for t in batch]
    videos = [model.encode_video(corpus.features(t.video_id)) for t in batch]
    return clip_loss(ad.stack_rows(texts), ad.stack_rows(videos),
                     model.temperature(), mode=mode)


def _validation_loss(model: Model, corpus: Corpus, batch_size: int,
                     mode: str) -> float:
    triplets = corpus.triplets
    total, count = 0.0, 0
    for start in range(0, len(triplets), batch_size):
        batch = triplets[start:start + batch_size]
        if len(batch) < 2:
            continue
        total += float(_batch_loss(model, batch, corpus, mode).data) * len(batch)
        count += len(batch)
    if count == 0:
        raise TrainingError("validation corpus has no batch of size >= 2")
    return total / count


def train_stage1(corpus: Corpus, config: TrainConfig, model_config: ModelConfig,
                 val_corpus: Optional[Corpus] = None,
                 vocab: Optional[Vocabulary] = None) -> tuple[Model, TrainReport]:
    """Fit the dual encoders with in-batch negatives; returns model + report.

    The vocabulary defaults to all q1/q2 text in the given corpus. Zero
    epochs returns the seeded initialization unchanged.
    """
    config.validate()
    if len(corpus.triplets) < config.batch_size:
        raise TrainingError(
            f"corpus has {len(corpus.triplets)} triplets, need >= batch_size "
            f"{config.batch_size}")
    if vocab is None:
        vocab = Vocabulary.build([t.q1 for t in corpus.triplets]
                                 + [t.q2 for t in corpus.triplets])
    model = Model.initialize(model_config, vocab, seed=config.seed)
    names = stage1_parameter_names(model.params)
    all_params = named_parameters(model.params)
    optimizer = Adam({n: all_params[n] for n in names}, config.learning_rate,
                     config.adam_beta1, config.adam_beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    report = TrainReport(stage="stage1", seed=config.seed, epochs=config.epochs,
                         batch_size=config.batch_size)
    if val_corpus is not None:
        report.val_loss_curve = [
            _validation_loss(model, val_corpus, config.batch_size, config.loss_mode)]
    started = time.perf_counter()
    triplets = list(corpus.triplets)
    for epoch in range(config.epochs):
        order = rng.permutation(len(triplets))
        epoch_loss, seen = 0.0, 0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [triplets[i] for i in order[start:start + config.batch_size]]
            if len(batch) < 2:
                continue  # a trailing single-pair batch carries no signal
            optimizer.zero_grad()
            with Tape() as tape:
                loss = _batch_loss(model, batch, corpus, config.loss_mode)
            _check_finite_loss(loss, "stage1", epoch, step)
            tape.backward(loss)
            optimizer.step()
            epoch_loss += float(loss.data) * len(batch)
            seen += len(batch)
        report.loss_curve.append(epoch_loss / max(seen, 1))
        if val_corpus is not None:
            report.val_loss_curve.append(
                _validation_loss(model, val_corpus, config.batch_size,
                                 config.loss_mode))
    report.final_tau = model.temperature().item()
    report.wall_clock_seconds = time.perf_counter() - started
    return model, report


def mine_hard_negatives(triplet: TripletRecord, index: EmbeddingIndex,
                        model: Model, n: int) -> list[str]:
    """Top stage-I candidates for q1, minus the positive, truncated to n.

    A corpus smaller than n+1 yields every non-positive candidate.
    """
    pool = stage1_retrieve(triplet.q1, model, index, min(n + 1, index.size))
    negatives = [vid for vid in pool.ids if vid != triplet.video_id]
    return negatives[:n]


def train_stage2(corpus: Corpus, model: Model,
                 config: TrainConfig) -> tuple[TrainReport, EmbeddingIndex]:
    """Fit fusion + re-ranker on hard-negative triples; encoders stay frozen.

    Returns the report and the stage-I training index (reusable by callers).
    Embeddings are precomputed once: with the encoders frozen they cannot
    change during this phase.
    """
    config.validate()
    if not corpus.triplets:
        raise TrainingError("stage-II training needs a non-empty corpus")
    index = build_index(corpus, model)
    q1_vecs = {t.id: model.encode_text(t.q1).data for t in corpus.triplets}
    q2_vecs = {t.id: model.encode_text(t.q2).data for t in corpus.triplets}
    negatives = {
        t.id: mine_hard_negatives(t, index, model,
                                  config.hard_negatives_per_positive)
        for t in corpus.triplets
    }
    neg_rows = {t.id: np.stack([index.row(nid) for nid in negatives[t.id]])
                for t in corpus.triplets if negatives[t.id]}
    pos_rows = {t.id: index.row(t.video_id) for t in corpus.triplets}

    all_params = named_parameters(model.params)
    stage2 = {n: all_params[n] for n in stage2_parameter_names(model.params)}
    optimizer = Adam(stage2, config.learning_rate, config.adam_beta1,
                     config.adam_beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    margin = ad.Tensor(config.stage2_margin, dtype=model.config.np_dtype)
    report = TrainReport(stage="stage2", seed=config.seed, epochs=config.epochs,
                         batch_size=config.batch_size, margin_curve=[])
    started = time.perf_counter()
    triplets = list(corpus.triplets)
    for epoch in range(config.epochs):
        order = rng.permutation(len(triplets))
        epoch_loss, pairs = 0.0, 0
        pos_total, pos_count, neg_total, neg_count = 0.0, 0, 0.0, 0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [triplets[i] for i in order[start:start + config.batch_size]
                     if negatives[triplets[i].id]]
            if not batch:
                continue
            z1b = np.stack([q1_vecs[t.id] for t in batch])
            z2b = np.stack([q2_vecs[t.id] for t in batch])
            if config.stage2_query_jitter > 0:
                # Jittering the frozen query embeddings regularizes the
                # fusion MLP; renormalize to stay on the unit sphere.
                z1b = z1b + config.stage2_query_jitter * rng.standard_normal(z1b.shape)
                z2b = z2b + config.stage2_query_jitter * rng.standard_normal(z2b.shape)
                z1b /= np.linalg.norm(z1b, axis=1, keepdims=True)
                z2b /= np.linalg.norm(z2b, axis=1, keepdims=True)
            # One pair-level graph per batch: every (triplet, negative) pair
            # gathers its fused row, and the hinge compares its positive and
            # negative scores elementwise.
            nps = config.stage2_negatives_per_step
            chosen = []
            for t in batch:
                pool = neg_rows[t.id]
                if nps and nps < pool.shape[0]:
                    picks = rng.choice(pool.shape[0], size=nps, replace=False)
                    chosen.append(pool[np.sort(picks)])
                else:
                    chosen.append(pool)
            owner = np.concatenate([
                np.full(rows.shape[0], i, dtype=np.int64)
                for i, rows in enumerate(chosen)])
            negs_all = np.concatenate(chosen)
            pos_all = np.stack([pos_rows[t.id] for t in batch])[owner]
            optimizer.zero_grad()
            with Tape() as tape:
                fused = model.fuse_batch(Tensor(z1b), Tensor(z2b),
                                         mode=config.fusion_mode)
                fused_pairs = ad.embedding_lookup(fused, owner)
                s_pos = model.rerank_scores_pairs(fused_pairs, Tensor(pos_all))
                s_neg = model.rerank_scores_pairs(fused_pairs, Tensor(negs_all))
                hinge = ad.relu(ad.add(ad.sub(margin, s_pos), s_neg))
                loss = ad.mean_all(hinge)
            _check_finite_loss(loss, "stage2", epoch, step)
            tape.backward(loss)
            optimizer.step()
            batch_pairs = owner.size
            pos_total += float(s_pos.data.sum())
            pos_count += batch_pairs
            neg_total += float(s_neg.data.sum())
            neg_count += batch_pairs
            epoch_loss += float(loss.data) * batch_pairs
            pairs += batch_pairs
        report.loss_curve.append(epoch_loss / max(pairs, 1))
        report.margin_curve.append(
            pos_total / max(pos_count, 1) - neg_total / max(neg_count, 1))
    report.wall_clock_seconds = time.perf_counter() - started
    return report, index
