"""Command-line entry point: ``match2 <command> ...``.

Every command prints a JSON result on stdout and exits 0.  Failures exit
nonzero and print one JSON line ``{"error": <category>, "message": ...}``
on stderr; the category comes from the exception hierarchy in
:mod:`match2.errors` (``usage`` for bad flags, ``io`` for filesystem errors,
``gradcheck`` when the gradient suite finds an error above tolerance).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import AnswerLookupError, ContractError, Match2Error

logger = logging.getLogger("match2")

EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Match2Error):
    category = "usage"


class GradcheckFailure(Match2Error):
    category = "gradcheck"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> dict:
    from .checkpoint import save_checkpoint
    from .config import load_config
    from .encoder import EncoderConfig
    from .model import Match2, Match2Config
    from .retrieval import index_answers
    from .text import build_vocab, load_answer_pool, load_dataset
    from .trainer import NegativeSampler, Trainer, accuracy

    run = load_config(args.config, args.set or ())
    if args.seed is not None:
        run.training.seed = args.seed
    tc = run.training
    data = Path(args.data)
    train = load_dataset(data, "train")
    dev = load_dataset(data, "dev") if (data / "dev.jsonl").exists() else None
    pool = load_answer_pool(data / "answers.jsonl") if (data / "answers.jsonl").exists() else None

    corpus = [t for r in train for t in (r.user_question, r.archived_question, r.archived_answer)]
    if pool:
        corpus += [text for _, text in pool]
    vocab = build_vocab(corpus, tc.min_freq)
    cfg = Match2Config(EncoderConfig(vocab_size=len(vocab), **run.encoder), **run.model)
    model = Match2(cfg, np.random.default_rng(tc.seed))
    sampler = None
    if model.uses_answers:
        if pool is None:
            sampler = NegativeSampler.from_records(train, tc.top_k, retrieve_from=tc.retrieve_from)
        else:
            sampler = NegativeSampler(index_answers(pool), tc.top_k, tc.retrieve_from)
    trainer = Trainer(model, vocab, tc, sampler)

    out = Path(args.out)
    history, best, best_epoch = [], -1.0, 0
    start = time.time()
    for _ in range(tc.epochs):
        m = trainer.train_epoch(train)
        row = {"epoch": m.epoch, "loss": m.mean_loss, "train_accuracy": m.accuracy, "steps": trainer.global_step}
        if dev:
            row["dev_accuracy"] = accuracy(model, vocab, dev)
        history.append(row)
        logger.info("epoch %d loss %.4f %s", m.epoch, m.mean_loss, f"dev {row['dev_accuracy']:.4f}" if dev else "")
        score = row.get("dev_accuracy", m.epoch)
        if not dev or score > best:
            best, best_epoch = score, m.epoch
            save_checkpoint(out, model, vocab, tc, trainer.optimizer, extra={"epoch": m.epoch, "selected_by": "dev_accuracy" if dev else "last"})
    if not history:
        save_checkpoint(out, model, vocab, tc, trainer.optimizer, extra={"epoch": 0, "selected_by": "last"})
    (out / "history.json").write_text(json.dumps(history, indent=2), encoding="utf-8")
    return {"command": "train", "out": str(out), "epochs": len(history), "selected_epoch": best_epoch,
            "dev_accuracy": best if dev else None, "parameters": model.num_parameters(),
            "seconds": round(time.time() - start, 3)}


def cmd_eval(args) -> dict:
    from .checkpoint import load_checkpoint
    from .evaluation import classification_metrics, group_analysis, write_group_csv
    from .text import load_dataset
    from .trainer import predict_proba, threshold

    ckpt = load_checkpoint(args.model)
    records = load_dataset(args.data)
    pred = threshold(predict_proba(ckpt.model, ckpt.vocab, records))
    report = classification_metrics(pred, [r.label for r in records])
    report.groups = group_analysis(records, pred, args.groups)
    result = {"command": "eval", "records": len(records), **report.to_json()}
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(result, indent=2, sort_keys=True), encoding="utf-8")
        groups_csv = path.with_name(path.stem + "_groups.csv")
        write_group_csv(report.groups, groups_csv)
        result["report"], result["groups_csv"] = str(path), str(groups_csv)
    result.pop("groups")
    return result


def cmd_predict(args) -> dict:
    from .checkpoint import load_checkpoint
    from .text import normalize, tokenize
    from .trainer import predict

    for name in ("qu", "qa", "ans"):
        if not tokenize(normalize(getattr(args, name))):
            raise ContractError(f"--{name} is empty after normalization")
    ckpt = load_checkpoint(args.model)
    p, label = predict(args.qu, args.qa, args.ans, ckpt.model, ckpt.vocab)
    return {"command": "predict", "y_q": p, "label": label}


def cmd_gradcheck(args) -> dict:
    from .gradcheck import run_suite

    start = time.time()
    probes = {}
    report = run_suite(args.module, h=args.h, probes=probes)
    worst = max(report, key=report.get)
    result = {
        "command": "gradcheck",
        "module": args.module,
        "h": args.h,
        "tol": args.tol,
        "checked": len(report),
        "max_relative_error": report[worst],
        "worst": worst,
        "coordinates": sum(n for n, _ in probes.values()),
        "kink_skipped": sum(k for _, k in probes.values()),
        "seconds": round(time.time() - start, 3),
        "failures": {k: v for k, v in sorted(report.items()) if v >= args.tol},
    }
    if result["failures"]:
        _emit(result)
        raise GradcheckFailure(f"{len(result['failures'])} parameter(s) exceed tolerance {args.tol}; worst {worst} = {report[worst]:.3e}")
    return result


def cmd_heatmap(args) -> dict:
    from .checkpoint import load_checkpoint
    from .evaluation import export_heatmap
    from .text import load_dataset

    ckpt = load_checkpoint(args.model)
    records = {r.record_id: r for r in load_dataset(args.data)}
    if args.record not in records:
        raise AnswerLookupError(f"record id {args.record!r} not found in {args.data}")
    files = export_heatmap(ckpt.model, ckpt.vocab, records[args.record], args.out)
    return {"command": "heatmap", "record": args.record, "files": {k: str(v) for k, v in files.items()}}


def cmd_index(args) -> dict:
    from .retrieval import index_answers
    from .text import load_answer_pool

    index = index_answers(load_answer_pool(args.answers))
    path = index.save(args.out)
    return {"command": "index", "documents": index.doc_count, "terms": len(index.postings),
            "avg_len": index.avg_len, "path": str(path)}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="match2", description="Question-pair matching through answers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train a model on DIR/train.jsonl (and DIR/dev.jsonl)")
    p.add_argument("--data", required=True, help="directory with train.jsonl, optional dev.jsonl and answers.jsonl")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics and Jaccard-group analysis on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--groups", type=int, default=20)
    p.add_argument("--report", default=None, help="write the JSON report here (group CSV alongside)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="score one (user question, archived question, answer) triple")
    p.add_argument("--model", required=True)
    p.add_argument("--qu", required=True)
    p.add_argument("--qa", required=True)
    p.add_argument("--ans", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite in float64")
    p.add_argument("--module", default="all", choices=["all", "encoder", "pattern", "gate", "head", "model"])
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("heatmap", help="export matching patterns of one record as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--record", required=True, help="record id")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("index", help="build a BM25 index over an answer pool")
    p.add_argument("--answers", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _emit(args.func(args))
        return 0
    except Match2Error as exc:
        category, message = exc.category, str(exc)
    except OSError as exc:
        category, message = "io", str(exc)
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return EXIT_USAGE if category == "usage" else EXIT_FAILURE

