"""Command-line driver: corpus generation, splitting, training, indexing,
evaluation, ablations, validation, and the HTTP service.

Every verb accepts ``--seed``, ``--config FILE`` (key=value lines supplying
flag defaults; explicit flags win) and ``--json`` (machine-readable stdout).
Exit code 0 on success, 1 with a message on stderr otherwise.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from datr import checkpoint as ckpt
from datr import data as dt
from datr import evaluation as ev
from datr import retrieval as rt
from datr import training as tr
from datr.model import ModelConfig


class CliError(ValueError):
    pass


def _parse_config_file(path: str) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key = key.strip().replace("-", "_")
        value = value.strip()
        try:
            values[key] = json.loads(value)
        except json.JSONDecodeError:
            values[key] = value
    return values


def _load_split(path: str) -> tuple[set[str], set[str]]:
    raw = json.loads(Path(path).read_text())
    return set(raw["train_videos"]), set(raw["test_videos"])


def _corpus_side(corpus: dt.Corpus, split_path: str | None, side: str) -> dt.Corpus:
    if split_path is None:
        return corpus
    train_ids, test_ids = _load_split(split_path)
    return corpus.subset(train_ids if side == "train" else test_ids)


def _infer_feature_dims(corpus: dt.Corpus) -> tuple[int, int]:
    if not corpus.videos:
        raise CliError("corpus has no videos")
    feats = corpus.features(corpus.video_ids[0])
    return feats.shape[0], feats.shape[1]


def _model_config(args, corpus: dt.Corpus) -> ModelConfig:
    n_frames, d_in = _infer_feature_dims(corpus)
    return ModelConfig(
        embed_dim=args.embed_dim,
        video_layers=args.video_layers,
        heads=args.heads,
        n_frames=n_frames,
        frame_feature_dim=d_in,
        text_layers=args.text_layers,
        max_tokens=args.max_tokens,
        tau_init=args.tau_init,
        dtype=args.dtype,
    )


def cmd_gen_corpus(args) -> dict:
    spec = dt.SyntheticSpec(
        n_topics=args.topics,
        details_per_topic=args.details,
        videos_per_detail=args.videos_per,
        d_in=args.d_in,
        noise_sigma=args.noise_sigma,
        n_frames=args.n_frames,
        seed=args.seed,
    )
    summary = dt.generate_synthetic_corpus(spec, args.out)
    return {"out": args.out, "seed": args.seed, **summary}


def cmd_split(args) -> dict:
    corpus = dt.load_corpus(args.corpus)
    train_ids, test_ids = ev.grouped_split(corpus, args.test_fraction, args.seed)
    payload = {
        "seed": args.seed,
        "test_fraction": args.test_fraction,
        "train_videos": sorted(train_ids),
        "test_videos": sorted(test_ids),
    }
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    return {"out": args.out, "train": len(train_ids), "test": len(test_ids)}


def cmd_train_stage1(args) -> dict:
    corpus = dt.load_corpus(args.corpus)
    from datr.model import Vocabulary
    vocab = Vocabulary.build([t.q1 for t in corpus.triplets]
                             + [t.q2 for t in corpus.triplets])
    train_corpus = _corpus_side(corpus, args.split, "train")
    config = tr.TrainConfig(batch_size=args.batch_size, epochs=args.epochs,
                            learning_rate=args.learning_rate, seed=args.seed,
                            loss_mode=args.loss_mode)
    model, report = tr.train_stage1(train_corpus, config,
                                    _model_config(args, corpus), vocab=vocab)
    ckpt.save_model(model, args.out)
    payload = {"checkpoint": args.out, **report.to_dict()}
    if args.report:
        Path(args.report).write_text(json.dumps(payload, indent=2) + "\n")
    return payload


def cmd_train_stage2(args) -> dict:
    corpus = dt.load_corpus(args.corpus)
    train_corpus = _corpus_side(corpus, args.split, "train")
    model = ckpt.load_model(args.checkpoint)
    config = tr.TrainConfig(batch_size=args.batch_size, epochs=args.epochs,
                            learning_rate=args.learning_rate, seed=args.seed,
                            hard_negatives_per_positive=args.negatives,
                            stage2_margin=args.margin,
                            fusion_mode=args.fusion_mode)
    report, _ = tr.train_stage2(train_corpus, model, config)
    ckpt.save_model(model, args.out)
    payload = {"checkpoint": args.out, **report.to_dict()}
    if args.report:
        Path(args.report).write_text(json.dumps(payload, indent=2) + "\n")
    return payload


def cmd_build_index(args) -> dict:
    corpus = dt.load_corpus(args.corpus)
    side_corpus = _corpus_side(corpus, args.split, args.side)
    model = ckpt.load_model(args.checkpoint)
    index = rt.build_index(side_corpus, model,
                           checkpoint_hash=ckpt.file_sha256(args.checkpoint))
    index.save(args.out)
    return {"out": args.out, "videos": index.size, "dim": index.dim}


def cmd_evaluate(args) -> dict:
    corpus = dt.load_corpus(args.corpus)
    side_corpus = _corpus_side(corpus, args.split, args.side)
    model = ckpt.load_model(args.checkpoint)
    index = rt.EmbeddingIndex.load(args.index)
    config = ev.EvalConfig(k=args.k, stage2=args.stage2 == "on",
                           fusion_mode=args.fusion_mode)
    result = ev.evaluate(side_corpus, model, index, config)
    if args.out:
        Path(args.out).write_text(result.to_json() + "\n")
    return result.to_dict()


def cmd_ablate(args) -> dict:
    corpus = dt.load_corpus(args.corpus)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    workdir = Path(args.workdir) if args.workdir else None
    if workdir:
        workdir.mkdir(parents=True, exist_ok=True)
    rows = ev.ablation_suite(
        corpus, seeds, _model_config(args, corpus),
        stage1_config=tr.desk_stage1_config(
            batch_size=args.batch_size, epochs=args.epochs,
            learning_rate=args.learning_rate),
        stage2_config=tr.desk_stage2_config(
            batch_size=args.batch_size, epochs=args.stage2_epochs,
            learning_rate=args.stage2_learning_rate,
            hard_negatives_per_positive=args.negatives),
        scope_k=args.scope_k, workdir=workdir,
        train_if_missing=not args.no_train)
    if args.out:
        Path(args.out).write_text(ev.ablation_json(rows) + "\n")
    return {"rows": json.loads(ev.ablation_json(rows)),
            "table": ev.ablation_table(rows)}


def cmd_validate(args) -> dict:
    report = dt.validate_corpus(args.corpus)
    if not report.ok:
        raise CliError(f"{len(report.violations)} violations:\n  "
                       + "\n  ".join(report.violations))
    return report.to_dict()


def cmd_serve(args) -> None:
    import uvicorn

    from datr.service import ServiceConfig, create_app

    port = int(os.environ.get("DATR_PORT", args.port))
    config = ServiceConfig(
        checkpoint_path=args.checkpoint,
        index_path=args.index,
        corpus_dir=args.corpus or "",
        port=port,
        k=args.k,
        m=args.m,
        stage2=args.stage2 == "on",
        fusion_mode=args.fusion_mode,
        session_ttl_seconds=args.session_ttl,
    )
    app = create_app(config)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--video-layers", type=int, default=6)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--text-layers", type=int, default=2)
    p.add_argument("--max-tokens", type=int, default=64)
    p.add_argument("--tau-init", type=float, default=0.07)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float64")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="datr")
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="key=value file supplying flag defaults")
        p.add_argument("--json", action="store_true",
                       help="machine-readable JSON on stdout")
        return p

    p = verb("gen-corpus", cmd_gen_corpus, "generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--topics", type=int, default=20)
    p.add_argument("--details", type=int, default=5)
    p.add_argument("--videos-per", type=int, default=3)
    p.add_argument("--d-in", type=int, default=64)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--n-frames", type=int, default=32)

    p = verb("split", cmd_split, "grouped train/test split by source")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-fraction", type=float, default=0.2)

    p = verb("train-stage1", cmd_train_stage1, "contrastive dual-encoder training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--loss-mode", choices=["bidirectional", "t2v"],
                   default="bidirectional")
    _add_model_flags(p)

    p = verb("train-stage2", cmd_train_stage2, "fusion + re-ranker training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--learning-rate", type=float, default=1e-2)
    p.add_argument("--negatives", type=int, default=80)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--fusion-mode", choices=["full", "add", "mul"], default="full")

    p = verb("build-index", cmd_build_index, "embed and index corpus videos")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split")
    p.add_argument("--side", choices=["train", "test"], default="test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = verb("evaluate", cmd_evaluate, "retrieval metrics on a split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split")
    p.add_argument("--side", choices=["train", "test"], default="test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--stage2", choices=["on", "off"], default="on")
    p.add_argument("--fusion-mode", choices=["full", "add", "mul"], default="full")
    p.add_argument("--out")

    p = verb("ablate", cmd_ablate, "seed-averaged ablation table")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--workdir")
    p.add_argument("--no-train", action="store_true",
                   help="only use existing checkpoints; mark the rest absent")
    p.add_argument("--scope-k", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--stage2-epochs", type=int, default=50)
    p.add_argument("--stage2-learning-rate", type=float, default=1e-2)
    p.add_argument("--negatives", type=int, default=80)
    p.add_argument("--out")
    _add_model_flags(p)

    p = verb("serve", cmd_serve, "run the HTTP session service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--corpus")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--stage2", choices=["on", "off"], default="on")
    p.add_argument("--fusion-mode", choices=["full", "add", "mul"], default="full")
    p.add_argument("--session-ttl", type=float, default=3600.0)

    p = verb("validate", cmd_validate, "audit a corpus directory")
    p.add_argument("--corpus", required=True)

    return parser


def _print_human(payload: dict) -> None:
    if "table" in payload:
        print(payload["table"])
        return
    if "recall_at" in payload:
        result = ev.EvalResult(
            recall_at={int(k): v for k, v in payload["recall_at"].items()},
            med_rank=payload["med_rank"], mean_rank=payload["mean_rank"],
            n_queries=payload["n_queries"])
        print(ev.format_table({"result": result}))
        extras = {k: payload[k] for k in ("skipped", "config") if k in payload}
        if extras:
            print(json.dumps(extras))
        return
    for key, value in payload.items():
        if isinstance(value, (list, dict)):
            value = json.dumps(value)
        print(f"{key}: {value}")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if "--config" in argv:
        config_path = argv[argv.index("--config") + 1]
        try:
            defaults = _parse_config_file(config_path)
        except (OSError, CliError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        for action in parser._subparsers._group_actions[0].choices.values():
            known = {a.dest for a in action._actions}
            action.set_defaults(**{k: v for k, v in defaults.items() if k in known})
    try:
        args = parser.parse_args(argv)
        payload = args.handler(args)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if payload is not None:
        if args.json:
            print(json.dumps(payload, sort_keys=True))
        else:
            _print_human(payload)
    return 0


if __name__ == "__main__":
    sys.exit(main())
