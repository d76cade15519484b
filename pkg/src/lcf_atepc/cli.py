"""``lcf-atepc`` command line: train, eval, predict, sweep, stats.

Failures print one JSON object ``{"error": code, "message": ...}`` to stderr
and exit nonzero (2 for bad input, 1 for anything unexpected).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import numerics as nx
from .corpus import (ATE_LABELS, CorpusError, Layout, TruncationError, make_span_instance,
                     parse_atepc_file, tokenize)
from .evaluation import (ATE_NOT_AVAILABLE, corpus_stats, evaluate, predict_apc, predict_ate_labels,
                         rows_to_csv, srd_sweep, sweep_rows)
from .experiment import (ConfigError, ExperimentConfig, VocabMismatchError, checkpoint_meta, load_model,
                         run_experiment, save_model)
from .heads import decode_iob, repair_iob

log = logging.getLogger("lcf_atepc")

THREADS_ENV = "LCF_ATEPC_THREADS"


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int = 2):
        super().__init__(message)
        self.code, self.exit_code = code, exit_code


def _workers() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError("config_invalid", f"{THREADS_ENV}={raw!r} is not an integer") from None


def _read_dataset(path, what: str):
    if path is None:
        return None
    if not Path(path).is_file():
        raise CliError("dataset_not_found", f"{what} dataset not found: {path}")
    try:
        return parse_atepc_file(path)
    except CorpusError as exc:
        raise CliError("dataset_invalid", f"{path}: {exc}") from exc


def _load_config(args) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        return cfg.replace(seed=args.seed, lcf_mode=args.lcf, layout=args.layout, task_mode=args.task,
                           srd_alpha=args.alpha, lang=args.lang, out_dir=getattr(args, "out", None),
                           train_path=getattr(args, "train", None), epochs=getattr(args, "epochs", None))
    except ConfigError as exc:
        raise CliError("config_invalid", str(exc)) from exc


def _lock(out_dir: Path) -> FileLock:
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise CliError("output_locked", f"{out_dir} is in use by another process") from None
    return lock


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _write_report(out_dir: Path, stem: str, report) -> None:
    (out_dir / f"{stem}.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / f"{stem}.csv").write_text(report.to_csv(), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not cfg.train_path:
        raise CliError("config_invalid", "train_path is required")
    train_set = _read_dataset(cfg.train_path, "train")
    dev_set = _read_dataset(cfg.dev_path, "dev")
    test_set = _read_dataset(cfg.test_path, "test")
    if not train_set:
        raise CliError("dataset_invalid", f"{cfg.train_path} holds no sentences")
    out = Path(cfg.out_dir)
    lock = _lock(out)
    try:
        (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
        try:
            result = run_experiment(cfg, train_set, dev_set, out_dir=out)
        except TruncationError as exc:
            raise CliError("dataset_invalid", str(exc)) from exc
        result.vocab.save(out / "vocab.txt")
        meta = checkpoint_meta(result.model, result.vocab, cfg, result.polarity_classes)
        meta["best_epoch"] = result.train_result.best_epoch
        save_model(out / "model.ckpt", result.model, meta)
        summary = {"out_dir": str(out), "best_epoch": result.train_result.best_epoch, "reports": {}}
        splits = {"dev": dev_set, "test": test_set} if (dev_set or test_set) else {"train": train_set}
        for name, sents in splits.items():
            if not sents:
                continue
            report = evaluate(result.model, sents, result.vocab, cfg.layout, result.polarity_classes)
            _write_report(out, f"report_{name}", report)
            summary["reports"][name] = report.headline()
        _emit(summary)
    finally:
        lock.release()
    return 0


def cmd_eval(args) -> int:
    model, vocab, meta = _load_checkpoint(args.checkpoint, args.vocab)
    sents = _read_dataset(args.data, "evaluation")
    layout = Layout(meta["layout"])
    report = evaluate(model, sents, vocab, layout, tuple(meta["polarity_classes"]))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    stem = args.name or "eval_report"
    _write_report(out, stem, report)
    head = report.headline()
    if layout is Layout.SPC:
        log.warning("aspect extraction is not scored for the SPC layout; ATE metrics reported as %s",
                    ATE_NOT_AVAILABLE)
    _emit({"report": str(out / f"{stem}.json"), **head})
    return 0


def _load_checkpoint(path, vocab=None):
    if not Path(path).is_file():
        raise CliError("checkpoint_not_found", f"checkpoint not found: {path}")
    try:
        return load_model(path, vocab)
    except VocabMismatchError as exc:
        raise CliError("vocab_mismatch", str(exc)) from exc
    except (nx.CheckpointError, CorpusError) as exc:
        raise CliError("checkpoint_invalid", str(exc)) from exc


def predict_records(model, vocab, meta, lines, lang: str) -> list[dict]:
    """Extract spans with the extraction head, then classify each span."""
    layout = Layout(meta["layout"])
    classes = tuple(meta["polarity_classes"])
    n = model.config.max_seq_len
    token_seqs = [tokenize(line, lang) for line in lines]
    label_ids = predict_ate_labels(model, vocab, token_seqs)
    records = []
    for tokens, ids in zip(token_seqs, label_ids):
        iob = repair_iob(ids)
        iob += [ATE_LABELS[0]] * (len(tokens) - len(iob))
        spans = decode_iob(ids)
        insts, kept = [], []
        for span in spans:
            try:
                insts.append(make_span_instance(tokens, span, layout, vocab, n))
                kept.append(span)
            except TruncationError:
                continue
        out_spans = []
        if insts:
            probs = predict_apc(model, insts)
            for span, p in zip(kept, probs):
                k = int(p.argmax())
                out_spans.append({"start": span.start, "end": span.end, "polarity": classes[k],
                                  "confidence": float(p[k])})
        records.append({"tokens": tokens, "iob": iob, "spans": out_spans})
    return records


def cmd_predict(args) -> int:
    model, vocab, meta = _load_checkpoint(args.checkpoint, args.vocab)
    if meta.get("task_mode") != "atepc":
        raise CliError("model_not_joint", "prediction needs a model trained in atepc mode")
    src = Path(args.input)
    if not src.is_file():
        raise CliError("dataset_not_found", f"input not found: {src}")
    lines = [ln for ln in src.read_text(encoding="utf-8").split("\n") if ln.strip()]
    lang = args.lang or meta.get("lang", "english")
    records = predict_records(model, vocab, meta, lines, lang)
    body = "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records)
    if args.output:
        Path(args.output).write_text(body, encoding="utf-8")
    else:
        sys.stdout.write(body)
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    if not cfg.train_path:
        raise CliError("config_invalid", "train_path is required")
    try:
        alphas = [int(a) for a in args.alphas.split(",") if a.strip()]
    except ValueError:
        raise CliError("config_invalid", f"bad alpha list {args.alphas!r}") from None
    if not alphas or min(alphas) < 0:
        raise CliError("config_invalid", "alphas must be a non-empty list of non-negative integers")
    train_set = _read_dataset(cfg.train_path, "train")
    eval_set = _read_dataset(cfg.test_path or cfg.dev_path, "evaluation") or train_set
    out = Path(cfg.out_dir)
    lock = _lock(out)
    try:
        results = srd_sweep(train_set, eval_set, cfg, alphas, workers=_workers())
        csv_text = rows_to_csv(sweep_rows(results))
        (out / "sweep.csv").write_text(csv_text, encoding="utf-8")
        sys.stdout.write(csv_text)
    finally:
        lock.release()
    return 0


def cmd_stats(args) -> int:
    splits = {}
    for item in args.split:
        name, _, path = item.partition("=")
        if not path:
            raise CliError("config_invalid", f"expected name=path, got {item!r}")
        splits[name] = _read_dataset(path, name)
    sys.stdout.write(rows_to_csv(corpus_stats(splits)))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--lcf", choices=["cdm", "cdw", "fusion"])
    p.add_argument("--layout", choices=["base", "spc"])
    p.add_argument("--task", choices=["atepc", "ate", "apc"])
    p.add_argument("--alpha", type=int, help="SRD threshold")
    p.add_argument("--lang", choices=["english", "chinese"])
    p.add_argument("--train", help="training set (overrides train_path)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="output directory (overrides out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcf-atepc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model; writes checkpoints plus a log and reports")
    _experiment_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab")
    p.add_argument("--out", help="report directory (default: next to the checkpoint)")
    p.add_argument("--name", help="report file stem (default: eval_report)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="extract aspects and polarities from raw text, one sentence per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", help="JSON-lines output (default: stdout)")
    p.add_argument("--vocab")
    p.add_argument("--lang", choices=["english", "chinese"])
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="train/evaluate once per SRD threshold")
    _experiment_flags(p)
    p.add_argument("--alphas", required=True, help="comma-separated thresholds, e.g. 1,3,5,7")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="aspect polarity counts per split")
    p.add_argument("split", nargs="+", help="name=path, e.g. train=data/train.atepc")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - top-level guard, must stay machine-readable
        print(json.dumps({"error": "internal_error", "message": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
