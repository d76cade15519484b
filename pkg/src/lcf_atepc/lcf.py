"""Semantic-relative distance and local-context focus matrices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK, WEIGHT = "mask", "weight"


@dataclass(frozen=True)
class FocusMatrix:
    kind: str
    rows: np.ndarray  # (n, d_h), every row constant

    @property
    def row_weights(self) -> np.ndarray:
        return self.rows[:, 0] if self.rows.shape[1] else np.zeros(len(self.rows))


def compute_srd(n: int, center: int, aspect_len: int) -> np.ndarray:
    """``|i - center| - floor(aspect_len / 2)`` for every position ``i < n``."""
    if not 0 <= center < n:
        raise ValueError(f"aspect center {center} outside [0, {n})")
    if not 1 <= aspect_len <= n:
        raise ValueError(f"aspect length {aspect_len} outside [1, {n}]")
    return np.abs(np.arange(n) - center) - aspect_len // 2


def cdm_weights(srd: np.ndarray, alpha: float) -> np.ndarray:
    return (np.asarray(srd) <= alpha).astype(np.float64)


def cdw_weights(srd: np.ndarray, alpha: float, n: int) -> np.ndarray:
    # clamped at 0: very distant tokens would otherwise get negative weights
    srd = np.asarray(srd)
    decay = np.maximum((n - (srd - alpha)) / n, 0.0)
    return np.where(srd <= alpha, 1.0, decay)


def cdm_matrix(srd: np.ndarray, alpha: float, d_h: int) -> FocusMatrix:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return FocusMatrix(MASK, np.repeat(cdm_weights(srd, alpha)[:, None], d_h, axis=1))


def cdw_matrix(srd: np.ndarray, alpha: float, n: int, d_h: int) -> FocusMatrix:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if n < 1:
        raise ValueError("n must be positive")
    return FocusMatrix(WEIGHT, np.repeat(cdw_weights(srd, alpha, n)[:, None], d_h, axis=1))


def apply_focus(features: np.ndarray, fm: FocusMatrix) -> np.ndarray:
    """Scale each feature row by its focus row (position-wise Hadamard product)."""
    features = np.asarray(features)
    if features.shape != fm.rows.shape:
        raise ValueError(f"features {features.shape} do not match focus matrix {fm.rows.shape}")
    return features * fm.rows


def instance_focus(instance, alpha: float, kind: str) -> np.ndarray:
    """Per-position focus weights (length ``max_seq_len``) for one training instance.

    [CLS] is always local since the polarity head pools it.  The SPC
    ``aspect [SEP]`` suffix is always non-local: zero under the mask, and
    decayed as if one step past ``alpha`` under weighting.  ``n`` for the decay
    is the number of non-padding positions.
    """
    srd = np.asarray(instance.srd, dtype=np.float64).copy()
    forced = np.zeros(len(srd), dtype=bool)
    forced[instance.suffix_slice] = True
    srd[forced] = np.maximum(srd[forced], alpha + 1)
    if kind == MASK:
        w = cdm_weights(srd, alpha)
    elif kind == WEIGHT:
        w = cdw_weights(srd, alpha, max(instance.valid_len, 1))
    else:
        raise ValueError(f"unknown focus kind {kind!r}")
    w[0] = 1.0
    return w
