"""Small trainable stand-ins for the local and global BERT layers.

Token plus learned position embeddings, then ``layers`` residual blocks of
tanh-activated multi-head self-attention.  No feed-forward sublayer and no
layer norm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ParameterStore, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    d_h: int = 64
    heads: int = 4
    layers: int = 2
    vocab_size: int = 4
    max_seq_len: int = 80

    def __post_init__(self):
        if self.d_h < 1 or self.heads < 1 or self.layers < 0:
            raise ValueError("d_h and heads must be positive, layers non-negative")
        if self.d_h % self.heads:
            raise ValueError(f"d_h={self.d_h} is not divisible by heads={self.heads}")
        if self.vocab_size < 1 or self.max_seq_len < 1:
            raise ValueError("vocab_size and max_seq_len must be positive")

    @property
    def d_k(self) -> int:
        return self.d_h // self.heads


class MHSA:
    """Multi-head self-attention with a tanh output: ``tanh([H_1; ...; H_h] W_mh)``."""

    def __init__(self, store: ParameterStore, prefix: str, d_h: int, heads: int):
        if d_h % heads:
            raise ValueError(f"d_h={d_h} is not divisible by heads={heads}")
        self.d_h, self.heads, self.d_k = d_h, heads, d_h // heads
        self.prefix = prefix
        self.wq = [store.weight(f"{prefix}.head{i}.wq", (d_h, self.d_k)) for i in range(heads)]
        self.wk = [store.weight(f"{prefix}.head{i}.wk", (d_h, self.d_k)) for i in range(heads)]
        self.wv = [store.weight(f"{prefix}.head{i}.wv", (d_h, self.d_k)) for i in range(heads)]
        self.w_mh = store.weight(f"{prefix}.wmh", (heads * self.d_k, d_h))

    def parameters(self) -> list[Tensor]:
        return [*self.wq, *self.wk, *self.wv, self.w_mh]

    def sda(self, x, head: int, valid: np.ndarray | None = None, return_attention: bool = False):
        """Scaled dot-product attention of one head.

        ``valid`` (..., n) marks non-padding positions; padded keys get no mass.
        """
        q = nx.matmul(x, self.wq[head])
        k = nx.matmul(x, self.wk[head])
        v = nx.matmul(x, self.wv[head])
        scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(self.d_k))
        mask = None if valid is None else np.asarray(valid, dtype=bool)[..., None, :]
        attn = nx.softmax_rows(scores, mask)
        out = nx.matmul(attn, v)
        return (out, attn) if return_attention else out

    def __call__(self, x, valid: np.ndarray | None = None) -> Tensor:
        if nx._value(x).shape[-1] != self.d_h:
            raise nx.ShapeError(f"{self.prefix}: expected width {self.d_h}, got {nx._value(x).shape}")
        heads = [self.sda(x, i, valid) for i in range(self.heads)]
        cat = heads[0] if self.heads == 1 else nx.concat_cols(*heads)
        return nx.tanh(nx.matmul(cat, self.w_mh))


class Encoder:
    def __init__(self, store: ParameterStore, prefix: str, config: EncoderConfig):
        self.config = config
        self.prefix = prefix
        self.tok_emb = store.weight(f"{prefix}.tok_emb", (config.vocab_size, config.d_h))
        self.pos_emb = store.weight(f"{prefix}.pos_emb", (config.max_seq_len, config.d_h))
        self.layers = [MHSA(store, f"{prefix}.layer{i}", config.d_h, config.heads)
                       for i in range(config.layers)]

    def parameters(self) -> list[Tensor]:
        return [self.tok_emb, self.pos_emb, *(p for layer in self.layers for p in layer.parameters())]

    def embed(self, input_ids: np.ndarray) -> Tensor:
        ids = np.asarray(input_ids)
        n = ids.shape[-1]
        if n > self.config.max_seq_len:
            raise nx.ShapeError(f"sequence of length {n} exceeds max_seq_len={self.config.max_seq_len}")
        pos = self.pos_emb if n == self.config.max_seq_len else nx.take_rows(self.pos_emb, n)
        return nx.add(nx.embedding(self.tok_emb, ids), pos)

    def __call__(self, input_ids: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
        x = self.embed(input_ids)
        for layer in self.layers:
            x = nx.add(x, layer(x, valid))
        return x
