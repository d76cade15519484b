"""Dual-labeled ATEPC corpora, from raw text and files to encoded instances.

File format, UTF-8, one token per line::

    The O -1
    price B_asp 2
    is O -1

Fields are ``token ate_label polarity``; sentences are separated by one blank
line.  Polarity is -1 on non-aspect tokens, else 0/1/2 for
negative/neutral/positive.
"""
from __future__ import annotations

import hashlib
import re
import string
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .lcf import compute_srd
from .numerics import IGNORE_INDEX

B_ASP, I_ASP, O = "B_asp", "I_asp", "O"
ATE_LABELS = (O, B_ASP, I_ASP)
ATE_LABEL_IDS = {label: i for i, label in enumerate(ATE_LABELS)}

NEGATIVE, NEUTRAL, POSITIVE, NO_POLARITY = 0, 1, 2, -1
POLARITY_NAMES = {NEGATIVE: "negative", NEUTRAL: "neutral", POSITIVE: "positive"}

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
RESERVED = (PAD, CLS, SEP, UNK)
PAD_ID, CLS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3

_PUNCT = set(string.punctuation) | set("，。！？；：、“”‘’（）…")
_CHINESE_TOKEN = re.compile(r"[A-Za-z0-9]+|\S")


class CorpusError(ValueError):
    """Malformed dataset content."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class LineFormatError(CorpusError):
    pass


class IOBError(CorpusError):
    pass


class PolarityError(CorpusError):
    pass


class TruncationError(ValueError):
    pass


class Layout(str, Enum):
    BASE = "base"
    SPC = "spc"


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------

def tokenize(text: str, mode: str = "english") -> list[str]:
    """Split raw review text into tokens.

    English: whitespace split, then trailing punctuation characters become
    separate tokens (``"poor."`` -> ``["poor", "."]``).  Chinese: one token per
    character, except runs of ASCII letters/digits which stay together.
    """
    if not text.strip():
        raise ValueError("cannot tokenize empty text")
    if mode == "english":
        tokens = []
        for word in text.split():
            tail = []
            while len(word) > 1 and word[-1] in _PUNCT:
                tail.append(word[-1])
                word = word[:-1]
            tokens.append(word)
            tokens.extend(reversed(tail))
        return tokens
    if mode == "chinese":
        return _CHINESE_TOKEN.findall(text)
    raise ValueError(f"unknown tokenizer mode {mode!r}")


# ---------------------------------------------------------------------------
# sentences and spans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AspectSpan:
    start: int
    end: int  # exclusive
    polarity: int | None = None

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"bad span [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


def _check_labels(ate_labels: Sequence[str], polarity_labels: Sequence[int], lines: Sequence[int] | None = None):
    def at(i):
        return lines[i] if lines is not None else None

    prev = O
    for i, (tag, pol) in enumerate(zip(ate_labels, polarity_labels)):
        if tag not in ATE_LABEL_IDS:
            raise LineFormatError(f"unknown aspect label {tag!r}", at(i))
        if tag == I_ASP and prev == O:
            where = "sentence start" if i == 0 else "O"
            raise IOBError(f"I_asp after {where}", at(i))
        if tag == O and pol != NO_POLARITY:
            raise PolarityError(f"polarity {pol} on a non-aspect token", at(i))
        if tag != O and pol not in POLARITY_NAMES:
            raise PolarityError(f"aspect token needs polarity 0/1/2, got {pol}", at(i))
        if tag == I_ASP and pol != polarity_labels[i - 1]:
            raise PolarityError("polarity changes inside an aspect chunk", at(i))
        prev = tag


@dataclass(frozen=True)
class LabeledSentence:
    tokens: tuple[str, ...]
    ate_labels: tuple[str, ...]
    polarity_labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "ate_labels", tuple(self.ate_labels))
        object.__setattr__(self, "polarity_labels", tuple(int(p) for p in self.polarity_labels))
        n = len(self.tokens)
        if n < 1:
            raise CorpusError("sentence needs at least one token")
        if len(self.ate_labels) != n or len(self.polarity_labels) != n:
            raise CorpusError("token and label sequences differ in length")
        _check_labels(self.ate_labels, self.polarity_labels)

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_spans(cls, tokens: Sequence[str], spans: Iterable[AspectSpan]) -> "LabeledSentence":
        """Paint IOB and polarity labels for non-overlapping ``spans``."""
        n = len(tokens)
        ate = [O] * n
        pol = [NO_POLARITY] * n
        for span in spans:
            if span.end > n or any(ate[i] != O for i in range(span.start, span.end)):
                raise ValueError(f"span {span} out of range or overlapping")
            for i in range(span.start, span.end):
                ate[i] = B_ASP if i == span.start else I_ASP
                pol[i] = span.polarity
        return cls(tuple(tokens), tuple(ate), tuple(pol))


def extract_aspects(s: LabeledSentence) -> list[AspectSpan]:
    spans = []
    start = None
    for i, tag in enumerate(s.ate_labels + (O,)):
        if start is not None and tag != I_ASP:
            spans.append(AspectSpan(start, i, s.polarity_labels[start]))
            start = None
        if tag == B_ASP:
            start = i
    return spans


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def parse_atepc_text(text: str) -> list[LabeledSentence]:
    sentences = []
    block: list[tuple[int, str, str, int]] = []

    def flush():
        if block:
            lines = [b[0] for b in block]
            tags = [b[2] for b in block]
            pols = [b[3] for b in block]
            _check_labels(tags, pols, lines)
            sentences.append(LabeledSentence(tuple(b[1] for b in block), tuple(tags), tuple(pols)))
            block.clear()

    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line:
            flush()
            continue
        fields = line.split()
        if len(fields) != 3:
            raise LineFormatError(f"expected 'token label polarity', got {len(fields)} fields", lineno)
        token, tag, pol = fields
        try:
            pol_id = int(pol)
        except ValueError:
            raise LineFormatError(f"polarity {pol!r} is not an integer", lineno) from None
        block.append((lineno, token, tag, pol_id))
    flush()
    return sentences


def parse_atepc_file(path) -> list[LabeledSentence]:
    return parse_atepc_text(Path(path).read_text(encoding="utf-8"))


def serialize_atepc(sentences: Iterable[LabeledSentence]) -> str:
    blocks = []
    for s in sentences:
        blocks.append("\n".join(f"{t} {a} {p}" for t, a, p in zip(s.tokens, s.ate_labels, s.polarity_labels)))
    return "\n\n".join(blocks) + "\n" if blocks else ""


def write_atepc_file(path, sentences: Iterable[LabeledSentence]) -> None:
    Path(path).write_text(serialize_atepc(sentences), encoding="utf-8")


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Token-to-id map with fixed reserved ids; frozen once built."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos = list(RESERVED)
        self._stoi = {t: i for i, t in enumerate(self._itos)}
        for t in tokens:
            if t not in self._stoi:
                self._stoi[t] = len(self._itos)
                self._itos.append(t)

    @classmethod
    def build(cls, sentences: Iterable[LabeledSentence]) -> "Vocabulary":
        return cls(t for s in sentences for t in s.tokens)

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._itos[i] for i in ids]

    def tokens(self) -> list[str]:
        return list(self._itos[len(RESERVED):])

    def save(self, path) -> None:
        body = "".join(t + "\n" for t in self.tokens())
        Path(path).write_text(body, encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        tokens = text.split("\n")
        if tokens and tokens[-1] == "":
            tokens.pop()
        dup = set(tokens) & set(RESERVED)
        if dup:
            raise CorpusError(f"vocabulary file lists reserved tokens {sorted(dup)}")
        return cls(tokens)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self._itos).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# training instances
# ---------------------------------------------------------------------------

@dataclass
class TrainingInstance:
    input_ids: np.ndarray
    attention_valid: np.ndarray
    layout: Layout
    aspect_center: int
    aspect_len: int
    ate_targets: np.ndarray
    apc_target: int
    srd: np.ndarray
    body_len: int  # sentence tokens kept after truncation
    span: AspectSpan | None = None
    sentence_index: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def max_seq_len(self) -> int:
        return len(self.input_ids)

    @property
    def valid_len(self) -> int:
        return int(self.attention_valid.sum())

    @property
    def suffix_slice(self) -> slice:
        """Positions of the SPC ``aspect [SEP]`` suffix (empty for BASE)."""
        start = self.body_len + 2
        return slice(start, self.valid_len) if self.layout is Layout.SPC else slice(start, start)


def _layout_overhead(layout: Layout, aspect_len: int) -> int:
    return 2 if layout is Layout.BASE else 3 + aspect_len


def _assemble(s: LabeledSentence, layout: Layout, vocab: Vocabulary, max_seq_len: int,
              span: AspectSpan | None, body_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    seq = [CLS_ID, *vocab.encode(s.tokens[:body_len]), SEP_ID]
    if layout is Layout.SPC and span is not None:
        seq += [*vocab.encode(s.tokens[span.start:span.end]), SEP_ID]
    ids = np.full(max_seq_len, PAD_ID, dtype=np.int64)
    ids[:len(seq)] = seq
    valid = np.zeros(max_seq_len, dtype=bool)
    valid[:len(seq)] = True
    ate = np.full(max_seq_len, IGNORE_INDEX, dtype=np.int64)
    ate[1:1 + body_len] = [ATE_LABEL_IDS[t] for t in s.ate_labels[:body_len]]
    return ids, valid, ate


def _body_len(n: int, layout: Layout, aspect_len: int, max_seq_len: int, span: AspectSpan | None) -> int:
    room = max_seq_len - _layout_overhead(layout, aspect_len)
    if room < 1:
        raise TruncationError(f"max_seq_len={max_seq_len} leaves no room for the sentence")
    body = min(n, room)
    if span is not None and span.end > body:
        raise TruncationError(f"aspect span [{span.start}, {span.end}) would be truncated at {body} tokens")
    return body


def make_instances(s: LabeledSentence, layout: Layout | str, vocab: Vocabulary, max_seq_len: int,
                   sentence_index: int | None = None,
                   polarity_classes: Sequence[int] = (NEGATIVE, NEUTRAL, POSITIVE)) -> list[TrainingInstance]:
    """One instance per aspect span of ``s``.

    ``apc_target`` is the index of the span's polarity code in
    ``polarity_classes``.  Sentence positions are shifted by one for [CLS];
    ``srd`` is measured in that padded coordinate system.
    """
    layout = Layout(layout)
    out = []
    for span in extract_aspects(s):
        body = _body_len(len(s), layout, span.length, max_seq_len, span)
        ids, valid, ate = _assemble(s, layout, vocab, max_seq_len, span, body)
        start_p, end_p = span.start + 1, span.end + 1
        center = (start_p + end_p - 1) // 2
        out.append(TrainingInstance(
            input_ids=ids, attention_valid=valid, layout=layout,
            aspect_center=center, aspect_len=span.length, ate_targets=ate,
            apc_target=list(polarity_classes).index(span.polarity),
            srd=compute_srd(max_seq_len, center, span.length),
            body_len=body, span=span, sentence_index=sentence_index))
    return out


def make_ate_instance(s: LabeledSentence, vocab: Vocabulary, max_seq_len: int,
                      sentence_index: int | None = None) -> TrainingInstance:
    """Aspect-free ``[CLS] sentence [SEP]`` encoding for extraction only.

    The APC target is ignored and SRD is all zeros (every position local);
    only the global branch matters for extraction.  Long sentences are cut
    from the right.
    """
    body = _body_len(len(s), Layout.BASE, 0, max_seq_len, None)
    ids, valid, ate = _assemble(s, Layout.BASE, vocab, max_seq_len, None, body)
    return TrainingInstance(
        input_ids=ids, attention_valid=valid, layout=Layout.BASE, aspect_center=0, aspect_len=0,
        ate_targets=ate, apc_target=IGNORE_INDEX, srd=np.zeros(max_seq_len, dtype=np.int64),
        body_len=body, span=None, sentence_index=sentence_index)


def make_span_instance(tokens: Sequence[str], span: AspectSpan, layout: Layout | str, vocab: Vocabulary,
                       max_seq_len: int) -> TrainingInstance:
    """Encode an unlabeled token sequence with a known aspect span (inference)."""
    painted = LabeledSentence.from_spans(tokens, [AspectSpan(span.start, span.end, POSITIVE)])
    inst = make_instances(painted, layout, vocab, max_seq_len)[0]
    inst.apc_target = IGNORE_INDEX
    inst.ate_targets[:] = IGNORE_INDEX
    inst.span = AspectSpan(span.start, span.end)
    return inst


def encode_dataset(sentences: Sequence[LabeledSentence], layout: Layout | str, vocab: Vocabulary,
                   max_seq_len: int, include_aspectless: bool = True,
                   polarity_classes: Sequence[int] = (NEGATIVE, NEUTRAL, POSITIVE)) -> list[TrainingInstance]:
    """Explode sentences into per-aspect instances; aspect-free sentences
    become extraction-only instances when ``include_aspectless``."""
    out = []
    for idx, s in enumerate(sentences):
        insts = make_instances(s, layout, vocab, max_seq_len, idx, polarity_classes)
        if not insts and include_aspectless:
            insts = [make_ate_instance(s, vocab, max_seq_len, idx)]
        out.extend(insts)
    return out


def infer_polarity_classes(sentences: Iterable[LabeledSentence]) -> tuple[int, ...]:
    """Three classes if any neutral aspect is present, else the binary {0, 2} scheme."""
    seen = {p for s in sentences for p in s.polarity_labels if p != NO_POLARITY}
    return (NEGATIVE, NEUTRAL, POSITIVE) if NEUTRAL in seen else (NEGATIVE, POSITIVE)
