"""Loss assembly and the AdamW epoch loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import LabeledSentence, Layout, Vocabulary, encode_dataset
from .evaluation import EvalReport, evaluate
from .heads import Batch, LcfAtepc, LcfMode, collate
from .numerics import IGNORE_INDEX, NonFiniteError, ParameterStore, Tensor

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "l_apc", "l_ate", "l_total")


class TaskMode(str, Enum):
    ATEPC = "atepc"
    ATE_ONLY = "ate"
    APC_ONLY = "apc"


class L2Mode(str, Enum):
    DECOUPLED = "decoupled"  # AdamW weight decay
    LOSS = "loss"            # lambda * sum(theta^2) added to each task loss


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-5
    batch_size: int = 16
    epochs: int = 5
    max_seq_len: int = 80
    srd_alpha: int = 5
    l2_lambda: float = 1e-5
    l2_mode: L2Mode = L2Mode.DECOUPLED
    task_mode: TaskMode = TaskMode.ATEPC
    lcf_mode: LcfMode = LcfMode.CDM
    layout: Layout = Layout.BASE
    seed: int = 0
    select_metric: str = "acc_apc"
    checkpoint_every: int = 1

    def __post_init__(self):
        for name, enum in (("l2_mode", L2Mode), ("task_mode", TaskMode), ("lcf_mode", LcfMode), ("layout", Layout)):
            object.__setattr__(self, name, enum(getattr(self, name)))
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_seq_len < 1:
            raise ValueError("learning_rate, batch_size and max_seq_len must be positive")
        if self.epochs < 0 or self.srd_alpha < 0 or self.l2_lambda < 0 or self.checkpoint_every < 0:
            raise ValueError("epochs, srd_alpha, l2_lambda and checkpoint_every must be non-negative")


@dataclass
class LossBreakdown:
    l_apc: float
    l_ate: float
    l_total: float
    l2_term: float = 0.0


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def l2_penalty(params: ParameterStore | Sequence[Tensor], lam: float) -> Tensor:
    tensors = params.tensors() if isinstance(params, ParameterStore) else list(params)
    return nx.scale(nx.sum_squares(tensors), lam)


def apc_loss(logits, targets, params=None, lam: float = 0.0) -> Tensor:
    """Polarity cross-entropy, plus ``lam * sum(theta^2)`` when ``lam`` > 0."""
    targets = np.asarray(targets)
    n_classes = nx._value(logits).shape[-1]
    bad = (targets != IGNORE_INDEX) & ((targets < 0) | (targets >= n_classes))
    if np.any(bad):
        raise ValueError(f"polarity target outside [0, {n_classes})")
    ce = nx.cross_entropy(logits, targets)
    if lam and params is not None:
        return nx.add_scalars(ce, l2_penalty(params, lam))
    return ce


def ate_loss(logits, targets, params=None, lam: float = 0.0) -> Tensor:
    """Mean token cross-entropy over non-ignored positions (+ optional L2)."""
    ce = nx.cross_entropy(logits, targets)
    if lam and params is not None:
        return nx.add_scalars(ce, l2_penalty(params, lam))
    return ce


def joint_loss(apc_part: Tensor, ate_part: Tensor, task_mode: TaskMode | str,
               l2_term: float = 0.0) -> tuple[Tensor, LossBreakdown]:
    task_mode = TaskMode(task_mode)
    if task_mode is TaskMode.ATEPC:
        total = nx.add_scalars(apc_part, ate_part)
    elif task_mode is TaskMode.ATE_ONLY:
        total = ate_part
    else:
        total = apc_part
    return total, LossBreakdown(apc_part.item(), ate_part.item(), total.item(), l2_term)


def batch_loss(model: LcfAtepc, batch: Batch, config: TrainConfig) -> tuple[Tensor, LossBreakdown]:
    out = model.forward(batch)
    lam = config.l2_lambda if config.l2_mode is L2Mode.LOSS else 0.0
    l_apc = apc_loss(out.apc_logits, batch.apc_targets, model.store, lam)
    l_ate = ate_loss(out.ate_logits, batch.ate_targets, model.store, lam)
    l2 = config.l2_lambda * sum(float(np.sum(t.value ** 2)) for t in model.store.tensors())
    return joint_loss(l_apc, l_ate, config.task_mode, l2)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adamw_update(value: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int, lr: float,
                 weight_decay: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One AdamW update; returns ``(new_value, new_m, new_v)``.

    ``step`` counts from 1.  Decay is decoupled: ``value * lr * weight_decay``
    is subtracted directly rather than folded into the gradient.
    """
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    new = value - lr * weight_decay * value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, m, v


class AdamW:
    def __init__(self, params: ParameterStore, lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.step_count = 0
        self._m = {name: np.zeros_like(t.value) for name, t in params}
        self._v = {name: np.zeros_like(t.value) for name, t in params}

    def step(self) -> None:
        bad = [name for name, t in self.params if not np.all(np.isfinite(t.grad))]
        if bad:
            raise NonFiniteError(f"non-finite gradients at step {self.step_count + 1} in {bad[:5]}")
        self.step_count += 1
        for name, t in self.params:
            t.value, self._m[name], self._v[name] = adamw_update(
                t.value, t.grad, self._m[name], self._v[name], self.step_count, self.lr,
                self.weight_decay, self.betas[0], self.betas[1], self.eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    epoch: int
    step: int
    loss: LossBreakdown


@dataclass
class TrainResult:
    model: LcfAtepc
    epoch_log: list[LossBreakdown] = field(default_factory=list)
    step_log: list[StepRecord] = field(default_factory=list)
    best_epoch: int | None = None
    dev_reports: list[EvalReport] = field(default_factory=list)


def format_log(records: Sequence[StepRecord]) -> str:
    lines = [",".join(LOG_FIELDS)]
    for r in records:
        lines.append(f"{r.epoch},{r.step},{r.loss.l_apc!r},{r.loss.l_ate!r},{r.loss.l_total!r}")
    return "\n".join(lines) + "\n"


def read_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def _mean_breakdown(records: Sequence[LossBreakdown]) -> LossBreakdown:
    n = len(records)
    return LossBreakdown(sum(r.l_apc for r in records) / n, sum(r.l_ate for r in records) / n,
                         sum(r.l_total for r in records) / n, sum(r.l2_term for r in records) / n)


def train(model: LcfAtepc, vocab: Vocabulary, sentences: Sequence[LabeledSentence], config: TrainConfig,
          polarity_classes: Sequence[int], dev: Sequence[LabeledSentence] | None = None,
          out_dir=None, on_step: Callable[[LcfAtepc, Batch, LossBreakdown], None] | None = None,
          checkpoint_meta: dict | None = None) -> TrainResult:
    """Optimize ``model`` in place.

    Shuffling is driven by ``config.seed`` so runs replay exactly.  With
    ``dev`` the parameters of the best epoch by ``config.select_metric`` are
    restored at the end, otherwise the last epoch's are kept.  With
    ``out_dir`` the step log goes to ``train_log.csv`` and checkpoints to
    ``checkpoints/``.
    """
    if not sentences:
        raise ValueError("training set is empty")
    if model.config.alpha != config.srd_alpha or model.config.lcf_mode is not config.lcf_mode:
        raise ValueError("model and training config disagree on srd_alpha / lcf_mode")
    if model.config.max_seq_len != config.max_seq_len:
        raise ValueError("model and training config disagree on max_seq_len")

    instances = encode_dataset(sentences, config.layout, vocab, config.max_seq_len,
                               include_aspectless=config.task_mode is not TaskMode.APC_ONLY,
                               polarity_classes=polarity_classes)
    if not instances:
        raise ValueError("no usable training instances for this task mode")
    wd = config.l2_lambda if config.l2_mode is L2Mode.DECOUPLED else 0.0
    opt = AdamW(model.store, config.learning_rate, wd)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(model)
    best_score, best_state = float("-inf"), None

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(instances))
        losses = []
        for k in range(0, len(order), config.batch_size):
            batch = collate([instances[i] for i in order[k:k + config.batch_size]], config.srd_alpha)
            model.store.zero_grad()
            total, breakdown = batch_loss(model, batch, config)
            total.backward()
            if on_step is not None:
                on_step(model, batch, breakdown)
            opt.step()
            step += 1
            losses.append(breakdown)
            result.step_log.append(StepRecord(epoch, step, breakdown))
        result.epoch_log.append(_mean_breakdown(losses))
        log.info("epoch %d: l_apc=%.5f l_ate=%.5f l_total=%.5f", epoch, result.epoch_log[-1].l_apc,
                 result.epoch_log[-1].l_ate, result.epoch_log[-1].l_total)

        if dev:
            report = evaluate(model, dev, vocab, config.layout, polarity_classes)
            result.dev_reports.append(report)
            score = report.metric(config.select_metric)
            if score > best_score:
                best_score, best_state, result.best_epoch = score, model.store.state(), epoch
        if out is not None:
            (out / "train_log.csv").write_text(format_log(result.step_log), encoding="utf-8")
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                nx.save_checkpoint(out / "checkpoints" / f"epoch_{epoch:03d}.ckpt", model.store.state(),
                                   {**(checkpoint_meta or {}), "epoch": epoch})

    if best_state is not None:
        model.store.load_state(best_state)
    elif config.epochs:
        result.best_epoch = config.epochs
    if out is not None:
        (out / "train_log.csv").write_text(format_log(result.step_log), encoding="utf-8")
    return result
