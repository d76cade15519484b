"""Joint aspect term extraction and aspect polarity classification (LCF-ATEPC)."""

from .corpus import AspectSpan, LabeledSentence, Layout, Vocabulary, parse_atepc_file, tokenize
from .heads import LcfAtepc, LcfMode, ModelConfig
from .train import TaskMode, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AspectSpan", "LabeledSentence", "Layout", "LcfAtepc", "LcfMode", "ModelConfig",
    "TaskMode", "TrainConfig", "Vocabulary", "parse_atepc_file", "tokenize",
]
