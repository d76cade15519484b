"""Scoring: metrics and reports, plus corpus statistics and the SRD sweep."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field, asdict
from typing import Hashable, Iterable, Sequence

import numpy as np

from .corpus import (ATE_LABELS, POLARITY_NAMES, AspectSpan, LabeledSentence, Layout,
                     Vocabulary, encode_dataset, extract_aspects, make_ate_instance)
from .heads import LcfAtepc, collate, decode_iob

ATE_NOT_AVAILABLE = "n/a"


@dataclass
class ConfusionMatrix:
    classes: tuple
    counts: np.ndarray  # counts[gold][pred]

    @classmethod
    def from_pairs(cls, golds: Sequence[Hashable], preds: Sequence[Hashable],
                   classes: Sequence[Hashable] | None = None) -> "ConfusionMatrix":
        if classes is None:
            classes = sorted(set(golds) | set(preds))
        index = {c: i for i, c in enumerate(classes)}
        counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for g, p in zip(golds, preds):
            counts[index[g], index[p]] += 1
        return cls(tuple(classes), counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class(self) -> dict:
        """precision/recall/F1/support for classes seen in gold or pred."""
        out = {}
        for i, c in enumerate(self.classes):
            tp = int(self.counts[i, i])
            gold = int(self.counts[i].sum())
            pred = int(self.counts[:, i].sum())
            if gold == 0 and pred == 0:
                continue
            p = tp / pred if pred else 0.0
            r = tp / gold if gold else 0.0
            f1 = 2 * p * r / (p + r) if p + r else 0.0
            out[c] = {"precision": p, "recall": r, "f1": f1, "support": gold}
        return out

    def macro_f1(self) -> float:
        stats = self.per_class()
        return float(np.mean([s["f1"] for s in stats.values()])) if stats else 0.0

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0


def apc_metrics(golds: Sequence[int], preds: Sequence[int]) -> tuple[float, float, ConfusionMatrix]:
    if len(golds) != len(preds):
        raise ValueError(f"{len(golds)} gold labels vs {len(preds)} predictions")
    if not golds:
        raise ValueError("no predictions to score")
    cm = ConfusionMatrix.from_pairs(list(golds), list(preds))
    return cm.accuracy(), cm.macro_f1(), cm


def _flatten_aligned(gold_seqs, pred_seqs):
    golds, preds = [], []
    if len(gold_seqs) != len(pred_seqs):
        raise ValueError("different number of gold and predicted sequences")
    for k, (g, p) in enumerate(zip(gold_seqs, pred_seqs)):
        if len(g) != len(p):
            raise ValueError(f"sequence {k}: gold length {len(g)} != predicted length {len(p)}")
        golds.extend(g)
        preds.extend(p)
    return golds, preds


def ate_token_f1(gold_seqs: Sequence[Sequence], pred_seqs: Sequence[Sequence]) -> float:
    """Macro F1 over token classes, classes absent from gold and pred skipped."""
    golds, preds = _flatten_aligned(gold_seqs, pred_seqs)
    if not golds:
        return 1.0
    return ConfusionMatrix.from_pairs(golds, preds).macro_f1()


def _span_key(s) -> tuple[int, int]:
    return (s.start, s.end) if isinstance(s, AspectSpan) else (int(s[0]), int(s[1]))


def chunk_counts(gold_spans: Iterable, pred_spans: Iterable) -> tuple[int, int, int]:
    gold = {_span_key(s) for s in gold_spans}
    pred = {_span_key(s) for s in pred_spans}
    return len(gold & pred), len(gold), len(pred)


def ate_chunk_f1(gold_spans: Iterable, pred_spans: Iterable) -> float:
    """Exact-match span F1 for one span set; 1.0 when both sets are empty."""
    return _f1_from_counts(*chunk_counts(gold_spans, pred_spans))


def _f1_from_counts(tp: int, n_gold: int, n_pred: int) -> float:
    if n_gold == 0 and n_pred == 0:
        return 1.0
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def corpus_ate_chunk_f1(gold_span_lists: Sequence[Iterable], pred_span_lists: Sequence[Iterable]) -> float:
    """Micro-averaged exact-span F1 across sentences (spans never match across sentences)."""
    tp = ng = npred = 0
    for g, p in zip(gold_span_lists, pred_span_lists):
        a, b, c = chunk_counts(g, p)
        tp, ng, npred = tp + a, ng + b, npred + c
    return _f1_from_counts(tp, ng, npred)


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    acc_apc: float | None
    f1_apc: float | None
    f1_ate_token: float | str | None
    f1_ate_chunk: float | str | None
    apc_per_class: dict = field(default_factory=dict)
    ate_per_class: dict = field(default_factory=dict)
    n_sentences: int = 0
    n_aspects: int = 0
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def headline(self) -> dict:
        return {"acc_apc": self.acc_apc, "f1_apc": self.f1_apc,
                "f1_ate_token": self.f1_ate_token, "f1_ate_chunk": self.f1_ate_chunk}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.headline().items():
            w.writerow([k, _fmt(v)])
        for c, s in sorted(self.apc_per_class.items()):
            for k in ("precision", "recall", "f1", "support"):
                w.writerow([f"apc_{c}_{k}", _fmt(s[k])])
        for c, s in sorted(self.ate_per_class.items()):
            for k in ("precision", "recall", "f1", "support"):
                w.writerow([f"ate_{c}_{k}", _fmt(s[k])])
        return buf.getvalue()

    def metric(self, name: str) -> float:
        if name == "sum":
            return sum(v for v in self.headline().values() if isinstance(v, float))
        v = getattr(self, name)
        return v if isinstance(v, float) else float("-inf")


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _unlabeled(tokens: Sequence[str]) -> LabeledSentence:
    return LabeledSentence(tuple(tokens), ("O",) * len(tokens), (-1,) * len(tokens))


def predict_ate_labels(model: LcfAtepc, vocab: Vocabulary, token_seqs: Sequence[Sequence[str]],
                       batch_size: int = 32) -> list[list[int]]:
    """Argmax token-class ids over each sentence body."""
    n = model.config.max_seq_len
    insts = [make_ate_instance(_unlabeled(t), vocab, n) for t in token_seqs]
    out = []
    for k in range(0, len(insts), batch_size):
        chunk = insts[k:k + batch_size]
        probs = model.ate_classify(collate(chunk, model.config.alpha))
        for inst, p in zip(chunk, probs):
            out.append([int(i) for i in p[1:1 + inst.body_len].argmax(axis=-1)])
    return out


def predict_apc(model: LcfAtepc, instances, batch_size: int = 32) -> np.ndarray:
    """Polarity distributions for instances, (len(instances), C)."""
    rows = []
    for k in range(0, len(instances), batch_size):
        rows.append(model.apc_classify(collate(instances[k:k + batch_size], model.config.alpha)))
    return np.concatenate(rows) if rows else np.zeros((0, model.config.num_polarities))


def evaluate(model: LcfAtepc, sentences: Sequence[LabeledSentence], vocab: Vocabulary,
             layout: Layout | str, polarity_classes: Sequence[int], batch_size: int = 32) -> EvalReport:
    """Score polarity on every aspect and extraction on every sentence.

    Extraction is not scored for SPC-layout models.
    """
    layout = Layout(layout)
    notes = []
    apc_insts = encode_dataset(sentences, layout, vocab, model.config.max_seq_len,
                               include_aspectless=False, polarity_classes=polarity_classes)
    acc = f1 = None
    apc_stats = {}
    if apc_insts:
        probs = predict_apc(model, apc_insts, batch_size)
        golds = [polarity_classes[i.apc_target] for i in apc_insts]
        preds = [polarity_classes[k] for k in probs.argmax(axis=1)]
        acc, f1, cm = apc_metrics(golds, preds)
        apc_stats = {POLARITY_NAMES[c]: s for c, s in cm.per_class().items()}
    else:
        notes.append("no aspects: polarity metrics undefined")

    if layout is Layout.SPC:
        tok_f1 = chunk_f1 = ATE_NOT_AVAILABLE
        ate_stats = {}
        notes.append("aspect extraction is not scored for the SPC input layout")
    else:
        pred_ids = predict_ate_labels(model, vocab, [s.tokens for s in sentences], batch_size)
        gold_seqs, pred_seqs = [], []
        gold_spans, pred_spans = [], []
        for s, p in zip(sentences, pred_ids):
            body = len(p)
            gold_seqs.append(list(s.ate_labels[:body]))
            pred_seqs.append([ATE_LABELS[i] for i in p])
            gold_spans.append([a for a in extract_aspects(s) if a.end <= body])
            pred_spans.append(decode_iob(p))
        tok_f1 = ate_token_f1(gold_seqs, pred_seqs)
        chunk_f1 = corpus_ate_chunk_f1(gold_spans, pred_spans)
        flat_g, flat_p = _flatten_aligned(gold_seqs, pred_seqs)
        ate_stats = ConfusionMatrix.from_pairs(flat_g, flat_p).per_class() if flat_g else {}
    return EvalReport(acc_apc=acc, f1_apc=f1, f1_ate_token=tok_f1, f1_ate_chunk=chunk_f1,
                      apc_per_class=apc_stats, ate_per_class=ate_stats, n_sentences=len(sentences),
                      n_aspects=len(apc_insts), notes=notes)


# ---------------------------------------------------------------------------
# corpus statistics
# ---------------------------------------------------------------------------

def polarity_counts(sentences: Iterable[LabeledSentence]) -> Counter:
    return Counter(span.polarity for s in sentences for span in extract_aspects(s))


def corpus_stats(splits: dict[str, Sequence[LabeledSentence]]) -> list[dict]:
    """Aspect counts per polarity and split, one row per polarity class."""
    counts = {name: polarity_counts(sents) for name, sents in splits.items()}
    rows = []
    for code, label in POLARITY_NAMES.items():
        row = {"polarity": label}
        for name in splits:
            row[name] = counts[name].get(code, 0)
        rows.append(row)
    total = {"polarity": "total"}
    for name in splits:
        total[name] = sum(counts[name].values())
    rows.append(total)
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# SRD sensitivity
# ---------------------------------------------------------------------------

def srd_sweep(train_sentences, eval_sentences, experiment, alphas: Sequence[int],
              workers: int = 1) -> list[tuple[int, EvalReport]]:
    """Train and evaluate one model per threshold, all from the same seed.

    ``experiment`` is an :class:`~lcf_atepc.experiment.ExperimentConfig`.
    """
    if not alphas:
        raise ValueError("alphas must be non-empty")
    args = [(train_sentences, eval_sentences, experiment, int(a)) for a in alphas]
    if workers > 1 and len(alphas) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_sweep_one, args))
    else:
        reports = [_sweep_one(a) for a in args]
    return list(zip([int(a) for a in alphas], reports))


def _sweep_one(args) -> EvalReport:
    from .experiment import run_experiment
    train_sentences, eval_sentences, experiment, alpha = args
    result = run_experiment(experiment.replace(srd_alpha=alpha), train_sentences, None)
    return evaluate(result.model, eval_sentences, result.vocab, experiment.layout, result.polarity_classes)


def sweep_rows(results: Sequence[tuple[int, EvalReport]]) -> list[dict]:
    return [{"alpha": a, **r.headline()} for a, r in results]
