"""Experiment configuration and the corpus -> model -> train wiring."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import numerics as nx
from .corpus import LabeledSentence, Layout, Vocabulary, infer_polarity_classes
from .encoder import EncoderConfig
from .heads import LcfAtepc, LcfMode, ModelConfig
from .train import L2Mode, TaskMode, TrainConfig, TrainResult, train

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment settings.

    Training defaults are the usual fine-tuning values (lr 3e-5, batch 16,
    5 epochs, 80 tokens, SRD threshold 5); the model defaults are desk scale.
    """

    train_path: str | None = None
    dev_path: str | None = None
    test_path: str | None = None
    out_dir: str = "runs/default"
    lang: str = "english"
    learning_rate: float = 3e-5
    batch_size: int = 16
    epochs: int = 5
    max_seq_len: int = 80
    srd_alpha: int = 5
    l2_lambda: float = 1e-5
    l2_mode: str = "decoupled"
    task_mode: str = "atepc"
    lcf_mode: str = "cdm"
    layout: str = "base"
    seed: int = 0
    select_metric: str = "acc_apc"
    checkpoint_every: int = 1
    d_h: int = 64
    heads: int = 4
    layers: int = 2
    local_heads: int | None = None
    local_layers: int | None = None
    global_heads: int | None = None
    global_layers: int | None = None
    dtype: str = "float64"
    num_polarities: int | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data.pop("config_version", None)
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {"config_version": CONFIG_VERSION, **dataclasses.asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.train_config()
            self.encoder_config("local", 4)
            self.encoder_config("global", 4)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.lang not in ("english", "chinese"):
            raise ConfigError(f"lang must be english or chinese, got {self.lang!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if self.select_metric not in ("acc_apc", "f1_apc", "f1_ate_token", "f1_ate_chunk", "sum"):
            raise ConfigError(f"unknown select_metric {self.select_metric!r}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
            max_seq_len=self.max_seq_len, srd_alpha=self.srd_alpha, l2_lambda=self.l2_lambda,
            l2_mode=L2Mode(self.l2_mode), task_mode=TaskMode(self.task_mode), lcf_mode=LcfMode(self.lcf_mode),
            layout=Layout(self.layout), seed=self.seed, select_metric=self.select_metric,
            checkpoint_every=self.checkpoint_every)

    def encoder_config(self, which: str, vocab_size: int) -> EncoderConfig:
        heads = getattr(self, f"{which}_heads") or self.heads
        layers = getattr(self, f"{which}_layers")
        return EncoderConfig(d_h=self.d_h, heads=heads, layers=self.layers if layers is None else layers,
                             vocab_size=vocab_size, max_seq_len=self.max_seq_len)

    def model_config(self, vocab_size: int, num_polarities: int) -> ModelConfig:
        return ModelConfig(local=self.encoder_config("local", vocab_size),
                           global_=self.encoder_config("global", vocab_size),
                           lcf_mode=LcfMode(self.lcf_mode), alpha=self.srd_alpha,
                           num_polarities=num_polarities, seed=self.seed, dtype=self.dtype)


@dataclass
class ExperimentResult:
    model: LcfAtepc
    vocab: Vocabulary
    polarity_classes: tuple[int, ...]
    train_result: TrainResult


def resolve_polarity_classes(cfg: ExperimentConfig, sentences: Sequence[LabeledSentence]) -> tuple[int, ...]:
    if cfg.num_polarities == 3:
        return (0, 1, 2)
    if cfg.num_polarities == 2:
        return (0, 2)
    if cfg.num_polarities is not None:
        raise ConfigError("num_polarities must be 2 or 3")
    return infer_polarity_classes(sentences)


def checkpoint_meta(model: LcfAtepc, vocab: Vocabulary, cfg: ExperimentConfig,
                    polarity_classes: Sequence[int]) -> dict:
    return {"model": model.config.to_dict(), "polarity_classes": list(polarity_classes),
            "layout": cfg.layout, "task_mode": cfg.task_mode, "lang": cfg.lang,
            "vocab_size": len(vocab), "vocab_fingerprint": vocab.fingerprint()}


def run_experiment(cfg: ExperimentConfig, train_sentences: Sequence[LabeledSentence],
                   dev_sentences: Sequence[LabeledSentence] | None = None, out_dir=None) -> ExperimentResult:
    vocab = Vocabulary.build(train_sentences)
    classes = resolve_polarity_classes(cfg, train_sentences)
    model = LcfAtepc(cfg.model_config(len(vocab), len(classes)))
    result = train(model, vocab, train_sentences, cfg.train_config(), classes, dev=dev_sentences,
                   out_dir=out_dir, checkpoint_meta=checkpoint_meta(model, vocab, cfg, classes))
    return ExperimentResult(model, vocab, classes, result)


def save_model(path, model: LcfAtepc, meta: dict) -> None:
    nx.save_checkpoint(path, model.store.state(), meta)


def load_model(checkpoint, vocab_path=None) -> tuple[LcfAtepc, Vocabulary, dict]:
    """Rebuild a model from a checkpoint and its vocabulary file.

    Without ``vocab_path``, ``vocab.txt`` is looked up next to the checkpoint
    and then one directory up.
    """
    state, meta = nx.load_checkpoint(checkpoint)
    if "model" not in meta:
        raise nx.CheckpointError(f"{checkpoint}: checkpoint carries no model configuration")
    ckpt = Path(checkpoint)
    if vocab_path is None:
        candidates = [ckpt.parent / "vocab.txt", ckpt.parent.parent / "vocab.txt"]
        vocab_path = next((c for c in candidates if c.exists()), None)
        if vocab_path is None:
            raise nx.CheckpointError(f"no vocab.txt found next to {checkpoint}")
    vocab = Vocabulary.load(vocab_path)
    if len(vocab) != meta.get("vocab_size") or vocab.fingerprint() != meta.get("vocab_fingerprint"):
        raise VocabMismatchError(f"vocabulary {vocab_path} does not match checkpoint {checkpoint}")
    try:
        model = LcfAtepc(ModelConfig.from_dict(meta["model"]))
    except (TypeError, ValueError, KeyError) as exc:
        raise nx.CheckpointError(f"{checkpoint}: bad model configuration: {exc}") from exc
    model.store.load_state(state)
    return model, vocab, meta


class VocabMismatchError(ValueError):
    pass
