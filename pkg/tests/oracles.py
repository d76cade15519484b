"""Naive reimplementations used as test oracles. Deliberately loop-based."""
import math


def srd_oracle(n, center, m):
    out = []
    for i in range(n):
        dist = i - center
        if dist < 0:
            dist = -dist
        out.append(dist - m // 2)
    return out


def cdm_oracle(srd, alpha, d_h):
    rows = []
    for s in srd:
        rows.append([1.0 if s <= alpha else 0.0 for _ in range(d_h)])
    return rows


def cdw_oracle(srd, alpha, n, d_h):
    rows = []
    for s in srd:
        if s <= alpha:
            w = 1.0
        else:
            w = (n - (s - alpha)) / n
            if w < 0:
                w = 0.0
        rows.append([w for _ in range(d_h)])
    return rows


def accuracy_oracle(golds, preds):
    hit = 0
    for g, p in zip(golds, preds):
        if g == p:
            hit += 1
    return hit / len(golds)


def macro_f1_oracle(golds, preds):
    classes = sorted(set(golds) | set(preds))
    f1s = []
    for c in classes:
        tp = fp = fn = 0
        for g, p in zip(golds, preds):
            if p == c and g == c:
                tp += 1
            elif p == c:
                fp += 1
            elif g == c:
                fn += 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(f1s) / len(f1s)


def token_f1_oracle(gold_seqs, pred_seqs):
    golds, preds = [], []
    for g, p in zip(gold_seqs, pred_seqs):
        golds.extend(g)
        preds.extend(p)
    return macro_f1_oracle(golds, preds)


def spans_oracle(labels):
    spans = []
    i = 0
    while i < len(labels):
        if labels[i] == "B_asp" or (labels[i] == "I_asp" and (i == 0 or labels[i - 1] == "O")):
            j = i + 1
            while j < len(labels) and labels[j] == "I_asp":
                j += 1
            spans.append((i, j))
            i = j
        else:
            i += 1
    return spans


def chunk_f1_oracle(gold_spans, pred_spans):
    gold, pred = set(gold_spans), set(pred_spans)
    if not gold and not pred:
        return 1.0
    tp = len(gold & pred)
    if tp == 0:
        return 0.0
    p, r = tp / len(pred), tp / len(gold)
    return 2 * p * r / (p + r)


def isclose(a, b):
    return math.isclose(a, b, rel_tol=0, abs_tol=0)
