"""LCF branch, feature interactive learning and the two task heads.

Shapes follow row-vector convention: features are (batch, n, d_h) and every
weight multiplies from the right.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import ATE_LABELS, AspectSpan, TrainingInstance
from .encoder import MHSA, Encoder, EncoderConfig
from .lcf import MASK, WEIGHT, instance_focus
from .numerics import ParameterStore, Tensor


class LcfMode(str, Enum):
    CDM = "cdm"
    CDW = "cdw"
    FUSION = "fusion"


@dataclass(frozen=True)
class ModelConfig:
    local: EncoderConfig = field(default_factory=EncoderConfig)
    global_: EncoderConfig = field(default_factory=EncoderConfig)
    lcf_mode: LcfMode = LcfMode.CDM
    alpha: int = 5
    num_polarities: int = 3
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "lcf_mode", LcfMode(self.lcf_mode))
        if self.local.d_h != self.global_.d_h:
            raise ValueError("local and global encoders must share d_h")
        if self.local.max_seq_len != self.global_.max_seq_len:
            raise ValueError("local and global encoders must share max_seq_len")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.num_polarities < 2:
            raise ValueError("need at least two polarity classes")

    @property
    def d_h(self) -> int:
        return self.local.d_h

    @property
    def max_seq_len(self) -> int:
        return self.local.max_seq_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lcf_mode"] = self.lcf_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["local"] = EncoderConfig(**d["local"])
        d["global_"] = EncoderConfig(**d["global_"])
        return cls(**d)


@dataclass
class Batch:
    input_ids: np.ndarray      # (B, n)
    valid: np.ndarray          # (B, n) bool
    focus: dict                # kind -> (B, n, 1) weights
    ate_targets: np.ndarray    # (B, n)
    apc_targets: np.ndarray    # (B,)
    instances: Sequence[TrainingInstance] = ()

    def __len__(self) -> int:
        return len(self.input_ids)


def collate(instances: Sequence[TrainingInstance], alpha: float) -> Batch:
    if not instances:
        raise ValueError("empty batch")
    return Batch(
        input_ids=np.stack([i.input_ids for i in instances]),
        valid=np.stack([i.attention_valid for i in instances]),
        focus={kind: np.stack([instance_focus(i, alpha, kind) for i in instances])[..., None]
               for kind in (MASK, WEIGHT)},
        ate_targets=np.stack([i.ate_targets for i in instances]),
        apc_targets=np.array([i.apc_target for i in instances], dtype=np.int64),
        instances=list(instances),
    )


@dataclass
class ForwardOutput:
    apc_logits: Tensor   # (B, C)
    ate_logits: Tensor   # (B, n, N)
    trace: dict


class LcfAtepc:
    """The joint extraction/polarity network."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.store = ParameterStore(seed=config.seed, dtype=np.dtype(config.dtype))
        s, d, h = self.store, config.d_h, config.local.heads
        self.local_encoder = Encoder(s, "local", config.local)
        self.global_encoder = Encoder(s, "global", config.global_)
        self.global_mhsa = MHSA(s, "global_mhsa", d, config.global_.heads)
        self.lcf_mhsa = MHSA(s, "lcf_mhsa", d, h)
        if config.lcf_mode is LcfMode.FUSION:
            self.fusion_w = s.weight("fusion.w", (2 * d, d))
            self.fusion_b = s.bias("fusion.b", d)
        self.fil_w = s.weight("fil.w", (2 * d, d))
        self.fil_b = s.bias("fil.b", d)
        self.fil_mhsa = MHSA(s, "fil_mhsa", d, h)
        self.apc_w = s.weight("apc.w", (d, config.num_polarities))
        self.apc_b = s.bias("apc.b", config.num_polarities)
        self.ate_w = s.weight("ate.w", (d, len(ATE_LABELS)))
        self.ate_b = s.bias("ate.b", len(ATE_LABELS))

    # -- parameter groups -------------------------------------------------

    def apc_head_names(self) -> list[str]:
        return ["apc.w", "apc.b"]

    def ate_head_names(self) -> list[str]:
        return ["ate.w", "ate.b"]

    def encoder_names(self, which: str) -> list[str]:
        return [n for n in self.store.names() if n.startswith(which + ".")]

    # -- stages -------------------------------------------------------------

    def encode(self, input_ids, valid, which: str) -> Tensor:
        if which not in ("local", "global"):
            raise ValueError(f"unknown encoder {which!r}")
        enc = self.local_encoder if which == "local" else self.global_encoder
        return enc(input_ids, valid)

    def local_features(self, o_bert_l, focus: dict, valid, trace: dict | None = None) -> Tensor:
        mode = self.config.lcf_mode
        trace = {} if trace is None else trace
        if mode is LcfMode.CDM:
            focused = trace["o_cdm"] = nx.hadamard_rows(o_bert_l, focus[MASK])
        elif mode is LcfMode.CDW:
            focused = trace["o_cdw"] = nx.hadamard_rows(o_bert_l, focus[WEIGHT])
        else:
            o_cdm = trace["o_cdm"] = nx.hadamard_rows(o_bert_l, focus[MASK])
            o_cdw = trace["o_cdw"] = nx.hadamard_rows(o_bert_l, focus[WEIGHT])
            focused = trace["o_fusion"] = nx.linear(nx.concat_cols(o_cdm, o_cdw), self.fusion_w, self.fusion_b)
        return self.lcf_mhsa(focused, valid)

    def feature_interactive_learning(self, o_l, o_g, valid) -> Tensor:
        if nx._value(o_l).shape != nx._value(o_g).shape:
            raise nx.ShapeError(f"local {nx._value(o_l).shape} and global {nx._value(o_g).shape} differ")
        dense = nx.linear(nx.concat_cols(o_l, o_g), self.fil_w, self.fil_b)
        return self.fil_mhsa(dense, valid)

    def apc_logits(self, o_fil) -> Tensor:
        # head pooling: the [CLS] position
        return nx.linear(nx.take_row(o_fil, 0), self.apc_w, self.apc_b)

    def ate_logits(self, o_g) -> Tensor:
        return nx.linear(o_g, self.ate_w, self.ate_b)

    def forward(self, batch: Batch) -> ForwardOutput:
        trace: dict = {}
        o_bert_l = trace["o_bert_l"] = self.encode(batch.input_ids, batch.valid, "local")
        o_bert_g = trace["o_bert_g"] = self.encode(batch.input_ids, batch.valid, "global")
        o_g = trace["o_g"] = self.global_mhsa(o_bert_g, batch.valid)
        o_l = trace["o_l"] = self.local_features(o_bert_l, batch.focus, batch.valid, trace)
        o_fil = trace["o_fil"] = self.feature_interactive_learning(o_l, o_g, batch.valid)
        return ForwardOutput(self.apc_logits(o_fil), self.ate_logits(o_g), trace)

    def forward_ate(self, batch: Batch) -> Tensor:
        """Extraction logits only; the local branch is skipped."""
        o_g = self.global_mhsa(self.encode(batch.input_ids, batch.valid, "global"), batch.valid)
        return self.ate_logits(o_g)

    # -- inference helpers --------------------------------------------------

    def apc_classify(self, batch: Batch) -> np.ndarray:
        """Polarity distributions, (B, C)."""
        with nx.no_grad():
            return softmax(self.forward(batch).apc_logits.value)

    def ate_classify(self, batch: Batch) -> np.ndarray:
        """Per-position token-class distributions, (B, n, N)."""
        with nx.no_grad():
            return softmax(self.forward_ate(batch).value)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits) - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decode_iob(labels: Sequence) -> list[AspectSpan]:
    """Spans of maximal B(I)* chunks; an I with no open chunk starts one.

    Labels may be strings (``"B_asp"``, ``"I"``, ...) or ids into ``ATE_LABELS``.
    """
    spans = []
    start = None
    for i, label in enumerate(list(labels) + ["O"]):
        tag = (ATE_LABELS[label] if isinstance(label, (int, np.integer)) else str(label))[0].upper()
        if tag == "B" or tag == "O":
            if start is not None:
                spans.append(AspectSpan(start, i))
            start = i if tag == "B" else None
        elif tag == "I":
            if start is None:
                start = i
        else:
            raise ValueError(f"unknown IOB label {label!r}")
    return spans


def repair_iob(labels: Sequence) -> list[str]:
    """IOB strings with every I-after-O rewritten to B."""
    out = [ATE_LABELS[0]] * len(labels)
    for span in decode_iob(labels):
        out[span.start] = ATE_LABELS[1]
        for i in range(span.start + 1, span.end):
            out[i] = ATE_LABELS[2]
    return out
