"""Command line pipeline: gen-data -> train-teacher -> cache-scores -> distill -> eval,
plus build-index / query / benchmark and manifest replay.

Every subcommand writes its artifact and a JSON run manifest next to it
(``<artifact>.manifest.json``) holding the argv, config, versions and metrics.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
from dataclasses import asdict
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, model_fingerprint, save_checkpoint
from .data import (
    Dataset,
    DatasetFormatError,
    SyntheticConfig,
    TaskKind,
    gen_synthetic,
    parse_dataset,
    random_sentences,
    save_dataset,
    split_dataset,
)
from .distill import ConfigurationError, LossConfig, logit_mse, train_student
from .encoder import EncoderConfig, InputError, Vocabulary, tokenize
from .metrics import compute_metrics
from .retrieval import BenchmarkScenario, build_index, load_index, online_query, run_benchmark, save_index
from .student import StudentModel, student_logits
from .teacher import TeacherModel, cache_teacher_scores, fine_tune_teacher, teacher_logits
from .training import TrainConfig, format_trace

log = logging.getLogger("dse")


def _unit_interval(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {value}")
    return value


def _open_interval(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {value}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, argv, command: str, args: argparse.Namespace, metrics: dict, artifacts: list, config=None) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
        "seed": getattr(args, "seed", None),
        "versions": {"dse": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "config": config or {},
        "metrics": metrics,
        "artifacts": {Path(a).name: _sha256(a) for a in artifacts},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest_path(out) -> str:
    return f"{out}.manifest.json"


def _vocab(args) -> Vocabulary:
    if getattr(args, "vocab", None):
        return Vocabulary.load(args.vocab)
    return Vocabulary.synthetic(getattr(args, "vocab_size", 512))


def _encoder_config(args, vocab: Vocabulary) -> EncoderConfig:
    return EncoderConfig(
        num_layers=args.layers,
        hidden=args.hidden,
        heads=args.heads,
        ffn=args.ffn,
        max_len=args.max_len,
        vocab_size=len(vocab),
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        seed=args.seed,
        freeze_encoder=getattr(args, "freeze_encoder", False),
        dev_fraction=args.dev_fraction,
    )


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args, argv) -> dict:
    syn = SyntheticConfig(
        vocab_size=args.vocab_size,
        num_topics=args.topics,
        topic_size=args.topic_size,
        noise=args.noise,
    )
    ds = gen_synthetic(args.seed, args.size, TaskKind(args.task), syn)
    save_dataset(ds, args.out)
    artifacts = [args.out]
    if args.vocab_out:
        ds.vocab.save(args.vocab_out)
        artifacts.append(args.vocab_out)
    labels = [ex.label for ex in ds]
    metrics = {"examples": len(ds)}
    if ds.task.is_classification:
        metrics["label_counts"] = {str(c): int(labels.count(c)) for c in range(ds.task.n)}
    else:
        metrics["label_mean"] = float(np.mean(labels))
    return {"metrics": metrics, "artifacts": artifacts, "config": {"synthetic": asdict(syn)}}


def _split(ds: Dataset, args):
    train, dev = split_dataset(ds, args.dev_fraction, args.seed)
    return {"train": train, "dev": dev, "all": ds}


def cmd_train_teacher(args, argv) -> dict:
    vocab = _vocab(args)
    ds = parse_dataset(args.data, vocab)
    cfg = _train_config(args)
    trace: list = []
    teacher = fine_tune_teacher(ds, cfg, _encoder_config(args, vocab), trace=trace)
    save_checkpoint(teacher, args.out)
    artifacts = [args.out]
    if args.trace:
        Path(args.trace).write_text(format_trace(trace), encoding="utf-8")
        artifacts.append(args.trace)
    splits = _split(ds, args)
    metrics = {}
    for name in ("train", "dev"):
        part = splits[name]
        logits = teacher_logits(teacher, [(ex.sentence_a, ex.sentence_b) for ex in part])
        metrics[name] = compute_metrics(logits, [ex.label for ex in part], part.task).to_dict()
    return {"metrics": metrics, "artifacts": artifacts, "config": {"encoder": teacher.config.to_dict(), "train": asdict(cfg)}}


def cmd_cache_scores(args, argv) -> dict:
    ds = parse_dataset(args.data, _vocab(args))
    teacher = load_checkpoint(args.teacher)
    if not isinstance(teacher, TeacherModel):
        raise InputError(f"{args.teacher} is not a teacher checkpoint")
    scored = cache_teacher_scores(teacher, ds)
    save_dataset(scored, args.out)
    return {"metrics": {"examples": len(scored)}, "artifacts": [args.out], "config": {"teacher": model_fingerprint(teacher)}}


def cmd_distill(args, argv) -> dict:
    vocab = _vocab(args)
    ds = parse_dataset(args.data, vocab)
    task = ds.task
    loss_cfg = LossConfig(args.alpha, task)
    train_cfg = _train_config(args)
    init_encoder = None
    if args.init_from_teacher:
        teacher = load_checkpoint(args.init_from_teacher)
        init_encoder = teacher.encoder
    student = StudentModel.init(_encoder_config(args, vocab), task, args.seed, args.head_hidden, encoder=init_encoder)
    trained, trace = train_student(ds, student, loss_cfg, train_cfg)
    save_checkpoint(trained, args.out)
    artifacts = [args.out]
    if args.trace:
        Path(args.trace).write_text(format_trace(trace), encoding="utf-8")
        artifacts.append(args.trace)
    _, dev = split_dataset(ds, args.dev_fraction, args.seed)
    logits = student_logits(trained, [(ex.sentence_a, ex.sentence_b) for ex in dev])
    metrics = {"dev": compute_metrics(logits, [ex.label for ex in dev], task).to_dict(), "best_dev_loss": min(r.dev_loss for r in trace)}
    if dev.has_teacher_logits:
        metrics["dev_teacher_logit_mse"] = logit_mse(logits, np.stack([ex.teacher_logits for ex in dev]))
    config = {
        "encoder": trained.config.to_dict(),
        "train": asdict(train_cfg),
        "alpha": args.alpha,
        "head_hidden": args.head_hidden,
        "pooled_layers": trained.pooled_layers,
    }
    return {"metrics": metrics, "artifacts": artifacts, "config": config}


def cmd_eval(args, argv) -> dict:
    ds = parse_dataset(args.data, _vocab(args))
    model = load_checkpoint(args.model)
    part = _split(ds, args)[args.split]
    pairs = [(ex.sentence_a, ex.sentence_b) for ex in part]
    if isinstance(model, TeacherModel):
        logits = teacher_logits(model, pairs)
    else:
        logits = student_logits(model, pairs)
    metrics = {args.split: compute_metrics(logits, [ex.label for ex in part], part.task).to_dict()}
    if part.has_teacher_logits:
        metrics["teacher_logit_mse"] = logit_mse(logits, np.stack([ex.teacher_logits for ex in part]))
    Path(args.out).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(metrics, sort_keys=True))
    return {"metrics": metrics, "artifacts": [args.out], "config": {"model": model_fingerprint(model)}}


def _read_catalog(path, vocab: Vocabulary) -> list[list[int]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [tokenize(ln, vocab) for ln in lines if ln.strip()]


def cmd_build_index(args, argv) -> dict:
    student = load_checkpoint(args.student)
    if not isinstance(student, StudentModel):
        raise InputError(f"{args.student} is not a student checkpoint")
    vocab = _vocab(args)
    artifacts = []
    if args.catalog:
        catalog = _read_catalog(args.catalog, vocab)
    else:
        catalog = random_sentences(args.seed, args.n, SyntheticConfig.for_vocab(student.config.vocab_size))
        catalog_path = f"{args.out}.catalog.txt"
        Path(catalog_path).write_text("".join(vocab.detokenize(s) + "\n" for s in catalog), encoding="utf-8")
        artifacts.append(catalog_path)
    index = build_index(student, catalog, workers=args.workers)
    save_index(index, args.out)
    artifacts.insert(0, args.out)
    return {"metrics": {"N": len(index), "d": index.dim}, "artifacts": artifacts, "config": {"fingerprint": index.fingerprint}}


def cmd_query(args, argv) -> dict:
    student = load_checkpoint(args.student)
    index = load_index(args.index)
    if index.fingerprint != model_fingerprint(student):
        raise InputError("index was built with a different student checkpoint")
    vocab = _vocab(args)
    results = online_query(index, student, tokenize(args.q, vocab), args.k, args.logit)
    catalog = _read_catalog(args.catalog, vocab) if args.catalog else None
    rows = []
    for rank_, (idx, score) in enumerate(results, start=1):
        row = {"rank": rank_, "id": idx, "score": score}
        if catalog is not None:
            row["sentence"] = vocab.detokenize(catalog[idx])
        rows.append(row)
    Path(args.out).write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    for row in rows:
        print(f"{row['rank']:>4}  id={row['id']:<6} score={row['score']:.6f}  {row.get('sentence', '')}".rstrip())
    return {"metrics": {"results": rows}, "artifacts": [args.out], "config": {}}


def cmd_benchmark(args, argv) -> dict:
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    student = load_checkpoint(args.student) if args.student else None
    scenario = BenchmarkScenario(
        kind=args.scenario,
        n=args.n,
        teacher_batch=args.teacher_batch,
        repeats=args.repeats,
        threads=args.threads,
    )
    report = run_benchmark(scenario, teacher, student, seed=args.seed)
    Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.table())
    return {"metrics": json.loads(report.to_json()), "artifacts": [args.out], "config": asdict(scenario)}


def cmd_replay(args, argv) -> dict | None:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    return main(manifest["argv"])


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _add_encoder_flags(p: argparse.ArgumentParser) -> None:
    d = EncoderConfig()
    p.add_argument("--layers", type=_positive_int, default=d.num_layers)
    p.add_argument("--hidden", type=_positive_int, default=d.hidden)
    p.add_argument("--heads", type=_positive_int, default=d.heads)
    p.add_argument("--ffn", type=_positive_int, default=d.ffn)
    p.add_argument("--max-len", type=_positive_int, default=d.max_len)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--batch", type=_positive_int, default=d.batch_size)
    p.add_argument("--dev-fraction", type=_open_interval, default=d.dev_fraction)
    p.add_argument("--trace", help="write the per-epoch loss trace CSV here")


def _add_vocab_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--vocab", help="vocabulary file (one token per line); default: synthetic")
    p.add_argument("--vocab-size", type=_positive_int, default=512)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dse", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic sentence-pair dataset")
    p.add_argument("--task", choices=[t.value for t in TaskKind], default="binary")
    p.add_argument("--size", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--topics", type=_positive_int, default=SyntheticConfig.num_topics)
    p.add_argument("--topic-size", type=_positive_int, default=SyntheticConfig.topic_size)
    p.add_argument("--noise", type=_unit_interval, default=SyntheticConfig.noise)
    p.add_argument("--vocab-size", type=_positive_int, default=512)
    p.add_argument("--vocab-out", help="also write the vocabulary file")
    p.add_argument("--out", default="data.tsv")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="fine-tune the cross-attentive teacher on labels")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="teacher.ckpt")
    _add_train_flags(p)
    _add_encoder_flags(p)
    _add_vocab_flags(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("cache-scores", help="append teacher logits to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", default="scored.tsv")
    _add_vocab_flags(p)
    p.set_defaults(func=cmd_cache_scores)

    p = sub.add_parser("distill", help="train the Siamese student")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="student.ckpt")
    p.add_argument("--alpha", type=_unit_interval, default=0.5)
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--head-hidden", type=_positive_int, default=64)
    p.add_argument("--init-from-teacher", metavar="CKPT", help="start psi from this teacher's encoder")
    _add_train_flags(p)
    _add_encoder_flags(p)
    _add_vocab_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="score a teacher or student checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=["dev", "train", "all"], default="dev")
    p.add_argument("--seed", type=int, default=TrainConfig.seed)
    p.add_argument("--dev-fraction", type=_open_interval, default=TrainConfig.dev_fraction)
    p.add_argument("--out", default="metrics.json")
    _add_vocab_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("build-index", help="precompute catalog embeddings")
    p.add_argument("--student", required=True)
    p.add_argument("--catalog", help="one sentence per line; default: synthetic catalog of --n sentences")
    p.add_argument("--n", type=_positive_int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--out", default="index.bin")
    _add_vocab_flags(p)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("query", help="rank an index against a query sentence")
    p.add_argument("--index", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--q", required=True, help="query sentence (whitespace tokens)")
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--logit", type=int, default=-1, help="logit used for ranking (default: last)")
    p.add_argument("--catalog", help="catalog file, to print matched sentences")
    p.add_argument("--out", default="query.json")
    _add_vocab_flags(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("benchmark", help="time teacher vs DSE scoring")
    p.add_argument("--scenario", choices=["online", "offline"], default="online")
    p.add_argument("--n", type=_positive_int, default=None, help="catalog size (default 10000 online, 200 offline)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--teacher")
    p.add_argument("--student")
    p.add_argument("--teacher-batch", type=_positive_int, default=256)
    p.add_argument("--repeats", type=_positive_int, default=1)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--out", default="benchmark.json")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "benchmark" and args.n is None:
        args.n = 10_000 if args.scenario == "online" else 200
    try:
        result = args.func(args, argv)
    except (InputError, ConfigurationError, DatasetFormatError, CheckpointError, ValueError, OSError) as exc:
        print(f"dse {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if args.command == "replay":
        return result
    write_manifest(_manifest_path(args.out), argv, args.command, args, result["metrics"], result["artifacts"], result.get("config"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
