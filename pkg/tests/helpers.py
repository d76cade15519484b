"""Small models and batches shared by the model-level tests."""
from pathlib import Path

from lcf_atepc.corpus import Vocabulary, encode_dataset, parse_atepc_file, parse_atepc_text
from lcf_atepc.encoder import EncoderConfig
from lcf_atepc.heads import LcfAtepc, ModelConfig, collate

FIXTURES = Path(__file__).parent / "fixtures"

TINY_TEXT = """good O -1
food B_asp 2
bad O -1
staff B_asp 0

ok O -1
menu B_asp 1
"""


def tiny_model(mode="cdm", alpha=1, n=6, vocab_size=12, d_h=8, heads=2, layers=1, seed=0, classes=3):
    enc = EncoderConfig(d_h=d_h, heads=heads, layers=layers, vocab_size=vocab_size, max_seq_len=n)
    return LcfAtepc(ModelConfig(local=enc, global_=enc, lcf_mode=mode, alpha=alpha,
                                num_polarities=classes, seed=seed))


def tiny_batch(alpha=1, n=6, layout="base"):
    sents = parse_atepc_text(TINY_TEXT)
    vocab = Vocabulary.build(sents)
    return collate(encode_dataset(sents, layout, vocab, n), alpha), vocab


def fixture_sentences():
    return parse_atepc_file(FIXTURES / "bilingual.atepc")
