"""Retrieval metrics, grouped splitting, evaluation, and the ablation runner.

Metrics follow the usual text-to-video conventions: Recall@K for K in
{1, 5, 10, 50, 100}, median rank (mean of the middle two for even counts)
and mean rank, all over the 1-based rank of the ground-truth video in a
total corpus ranking. When stage II is on, it reorders only the stage-I
top-K prefix; everything below keeps its stage-I position, which yields the
total ranking the rank-based metrics need.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from datr import checkpoint as ckpt
from datr.data import Corpus
from datr.model import ModelConfig
from datr.retrieval import EmbeddingIndex, build_index, full_ranking
from datr.training import TrainConfig, train_stage1, train_stage2

RECALL_CUTOFFS = (1, 5, 10, 50, 100)


class EvalError(ValueError):
    """Evaluation contract violation."""


class SplitError(ValueError):
    """No grouped split can satisfy the requested ratio."""


@dataclass
class EvalResult:
    recall_at: dict[int, float]
    med_rank: float
    mean_rank: float
    n_queries: int
    skipped: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "med_rank": self.med_rank,
            "mean_rank": self.mean_rank,
            "n_queries": self.n_queries,
            "skipped": self.skipped,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def rank_of_truth(ranking: Sequence[str], truth_id: str) -> int:
    """1-based position of the ground-truth id in a total ranking."""
    for pos, vid in enumerate(ranking, start=1):
        if vid == truth_id:
            return pos
    raise EvalError(f"ground-truth id {truth_id!r} absent from the ranking")


def compute_metrics(ranks: Sequence[int],
                    cutoffs: Sequence[int] = RECALL_CUTOFFS) -> EvalResult:
    """Aggregate 1-based ranks into Recall@K, MedR and MeanR."""
    if not ranks:
        raise EvalError("compute_metrics needs at least one rank")
    if any(r < 1 for r in ranks):
        raise EvalError("ranks are 1-based and must be >= 1")
    arr = np.asarray(ranks, dtype=np.float64)
    n = arr.size
    recall = {k: float((arr <= k).sum() / n) for k in cutoffs}
    ordered = np.sort(arr)
    mid = n // 2
    med = float(ordered[mid]) if n % 2 else float((ordered[mid - 1] + ordered[mid]) / 2.0)
    return EvalResult(recall_at=recall, med_rank=med, mean_rank=float(arr.mean()),
                      n_queries=n)


def grouped_split(corpus: Corpus, test_fraction: float = 0.2,
                  seed: int = 0) -> tuple[set[str], set[str]]:
    """Partition video ids so no source spans both sides.

    Shuffles sources with the seed and takes the prefix whose video count is
    closest to the target; errors if the best achievable share misses the
    target by more than 5 percentage points.
    """
    if not 0.0 < test_fraction < 1.0:
        raise SplitError(f"test_fraction must be in (0, 1), got {test_fraction}")
    by_source: dict[str, list[str]] = {}
    for vid in corpus.video_ids:
        by_source.setdefault(corpus.videos[vid].source_id, []).append(vid)
    if len(by_source) < 2:
        raise SplitError("grouped split needs at least 2 sources")
    rng = np.random.default_rng(seed)
    sources = sorted(by_source)
    order = [sources[i] for i in rng.permutation(len(sources))]
    total = len(corpus.video_ids)
    target = test_fraction * total

    best_cut, best_gap, count = 0, target, 0
    for i, source in enumerate(order, start=1):
        count += len(by_source[source])
        gap = abs(count - target)
        if gap < best_gap and i < len(order):
            best_cut, best_gap = i, gap
    test_sources = set(order[:best_cut])
    test_ids = {vid for s in test_sources for vid in by_source[s]}
    if abs(len(test_ids) / total - test_fraction) > 0.05:
        raise SplitError(
            f"closest grouped split puts {len(test_ids)}/{total} videos in test; "
            f"outside {test_fraction:.0%} +/- 5 points")
    train_ids = set(corpus.video_ids) - test_ids
    return train_ids, test_ids


@dataclass
class EvalConfig:
    k: int = 100            # stage-I prefix handed to the re-ranker
    stage2: bool = True
    fusion_mode: str = "full"

    def descriptor(self) -> dict:
        return {"k": self.k, "stage2": self.stage2, "fusion_mode": self.fusion_mode}


def evaluate(test_corpus: Corpus, model, index: EmbeddingIndex,
             config: Optional[EvalConfig] = None) -> EvalResult:
    """Rank every indexed video per test query; aggregate truth ranks.

    Queries whose ground-truth video is missing from the index are skipped
    and counted in the result.
    """
    config = config or EvalConfig()
    ranks, skipped = [], 0
    indexed = set(index.ids)
    for t in test_corpus.triplets:
        if t.video_id not in indexed:
            skipped += 1
            continue
        ranking = full_ranking(t.q1, t.q2, model, index, k=config.k,
                               stage2=config.stage2,
                               fusion_mode=config.fusion_mode)
        ranks.append(rank_of_truth(ranking, t.video_id))
    if not ranks:
        raise EvalError("no evaluable queries (all ground truths missing)")
    result = compute_metrics(ranks)
    result.skipped = skipped
    result.config = config.descriptor()
    return result


TABLE_COLUMNS = ("R@1", "R@5", "R@10", "R@50", "R@100", "MedR", "MeanR")


def format_table(rows: dict[str, EvalResult]) -> str:
    """Aligned text table with one row per configuration."""
    label_width = max((len(name) for name in rows), default=10)
    header = "Setting".ljust(label_width) + "".join(f"{c:>9}" for c in TABLE_COLUMNS)
    lines = [header, "-" * len(header)]
    for name, r in rows.items():
        cells = [f"{100 * r.recall_at[k]:9.1f}" for k in RECALL_CUTOFFS]
        cells.append(f"{r.med_rank:9.1f}")
        cells.append(f"{r.mean_rank:9.1f}")
        lines.append(name.ljust(label_width) + "".join(cells))
    return "\n".join(lines)


@dataclass
class AblationRow:
    study: str
    setting: str
    result: Optional[EvalResult]  # None marks a missing checkpoint


def _mean_results(results: list[EvalResult]) -> EvalResult:
    recall = {k: float(np.mean([r.recall_at[k] for r in results]))
              for k in RECALL_CUTOFFS}
    return EvalResult(
        recall_at=recall,
        med_rank=float(np.mean([r.med_rank for r in results])),
        mean_rank=float(np.mean([r.mean_rank for r in results])),
        n_queries=sum(r.n_queries for r in results),
        skipped=sum(r.skipped for r in results),
        config={"seeds": len(results)},
    )


def run_seed(corpus: Corpus, seed: int, model_config: ModelConfig,
             stage1_config: TrainConfig, stage2_config: TrainConfig, scope_k: int,
             workdir: Optional[Path] = None,
             train_if_missing: bool = True) -> dict[str, EvalResult]:
    """Train and evaluate every ablation configuration for one seed.

    One-factor-at-a-time around the full system: stage-II presence, fusion
    mode, contrastive direction, and re-rank scope. Two stage-I trainings
    per seed (bidirectional, t2v-only); each stage-II variant restarts from
    the same seeded fusion/re-ranker initialization. Stage-I checkpoints
    land in ``workdir`` when given and are reused on a rerun; with
    ``train_if_missing=False`` a missing checkpoint drops that branch's rows.
    """
    from datr.model import Vocabulary, named_parameters, stage2_parameter_names

    train_ids, test_ids = grouped_split(corpus, 0.2, seed=seed)
    train_corpus = corpus.subset(train_ids)
    test_corpus = corpus.subset(test_ids)
    vocab = Vocabulary.build([t.q1 for t in corpus.triplets]
                             + [t.q2 for t in corpus.triplets])

    def stage1(loss_mode: str):
        cfg = TrainConfig(**{**stage1_config.__dict__, "seed": seed,
                             "loss_mode": loss_mode})
        path = workdir and workdir / f"seed{seed}_stage1_{loss_mode}.ckpt"
        if path and path.exists():
            return ckpt.load_model(path)
        if not train_if_missing:
            return None
        model, _ = train_stage1(train_corpus, cfg, ModelConfig(**model_config.to_dict()),
                                vocab=vocab)
        if path:
            ckpt.save_model(model, path)
        return model

    def train_mode(model, stage2_init, fusion_mode: str):
        params = named_parameters(model.params)
        for name, arr in stage2_init.items():
            params[name].data = arr.copy()
        cfg = TrainConfig(**{**stage2_config.__dict__, "seed": seed,
                             "fusion_mode": fusion_mode})
        train_stage2(train_corpus, model, cfg)

    results: dict[str, EvalResult] = {}

    model_bi = stage1("bidirectional")
    if model_bi is not None:
        init_bi = {n: named_parameters(model_bi.params)[n].data.copy()
                   for n in stage2_parameter_names(model_bi.params)}
        test_index = build_index(test_corpus, model_bi)
        results["stage1_only"] = evaluate(test_corpus, model_bi, test_index,
                                          EvalConfig(stage2=False))
        train_mode(model_bi, init_bi, "full")
        results["full"] = evaluate(test_corpus, model_bi, test_index, EvalConfig())
        results["scope_topk"] = evaluate(test_corpus, model_bi, test_index,
                                         EvalConfig(k=scope_k))
        results["scope_full"] = evaluate(test_corpus, model_bi, test_index,
                                         EvalConfig(k=test_index.size))
        for mode in ("add", "mul"):
            train_mode(model_bi, init_bi, mode)
            results[f"fusion_{mode}"] = evaluate(test_corpus, model_bi, test_index,
                                                 EvalConfig(fusion_mode=mode))

    model_t2v = stage1("t2v")
    if model_t2v is not None:
        init_t2v = {n: named_parameters(model_t2v.params)[n].data.copy()
                    for n in stage2_parameter_names(model_t2v.params)}
        t2v_index = build_index(test_corpus, model_t2v)
        train_mode(model_t2v, init_t2v, "full")
        results["loss_t2v"] = evaluate(test_corpus, model_t2v, t2v_index, EvalConfig())
    return results


def ablation_suite(corpus: Corpus, seeds: Sequence[int], model_config: ModelConfig,
                   stage1_config: TrainConfig, stage2_config: TrainConfig,
                   scope_k: int = 15, workdir: Optional[Path] = None,
                   train_if_missing: bool = True) -> list[AblationRow]:
    """Seed-averaged one-factor-at-a-time ablation table."""
    per_seed = [run_seed(corpus, s, model_config, stage1_config, stage2_config,
                         scope_k, workdir, train_if_missing=train_if_missing)
                for s in seeds]

    def mean_of(key: str) -> Optional[EvalResult]:
        found = [r[key] for r in per_seed if key in r]
        return _mean_results(found) if found else None

    full = mean_of("full")
    return [
        AblationRow("stage2", "without", mean_of("stage1_only")),
        AblationRow("stage2", "with", full),
        AblationRow("fusion", "add_only", mean_of("fusion_add")),
        AblationRow("fusion", "mul_only", mean_of("fusion_mul")),
        AblationRow("fusion", "add_mul_mlp", full),
        AblationRow("loss", "t2v_only", mean_of("loss_t2v")),
        AblationRow("loss", "bidirectional", full),
        AblationRow("scope", f"top{scope_k}", mean_of("scope_topk")),
        AblationRow("scope", "full_corpus", mean_of("scope_full")),
    ]


def ablation_table(rows: list[AblationRow]) -> str:
    present = {f"{r.study}/{r.setting}": r.result for r in rows if r.result}
    table = format_table(present)
    absent = [f"{r.study}/{r.setting}: checkpoint missing"
              for r in rows if r.result is None]
    return table + ("\n" + "\n".join(absent) if absent else "")


def ablation_json(rows: list[AblationRow]) -> str:
    payload = [{"study": r.study, "setting": r.setting,
                "result": r.result.to_dict() if r.result else None} for r in rows]
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))
