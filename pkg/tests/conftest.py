import numpy as np
import pytest

from dse.data import TaskKind, TrainingExample, gen_synthetic
from dse.encoder import EncoderConfig
from dse.numkernel import SeededRng

# Small enough that gradient checks and training smoke tests stay fast.
TINY = EncoderConfig(num_layers=2, hidden=16, heads=2, ffn=32, max_len=16, vocab_size=64)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def rng():
    return SeededRng(1234)


def random_sentence(rng: SeededRng, vocab_size: int, lo: int = 1, hi: int = 8) -> list[int]:
    n = int(rng.integers(lo, hi + 1))
    return [int(t) for t in rng.integers(4, vocab_size, size=n)]


def scored_examples(task: TaskKind, count: int, vocab_size: int, seed: int = 0) -> list[TrainingExample]:
    """Random pairs with random labels and random cached teacher logits."""
    rng = SeededRng(seed)
    out = []
    for _ in range(count):
        a, b = random_sentence(rng, vocab_size), random_sentence(rng, vocab_size)
        label = int(rng.integers(0, task.n)) if task.is_classification else float(rng.uniform())
        out.append(TrainingExample(a, b, label, rng.normal((task.n,), 1.0)))
    return out


def tiny_dataset(task: TaskKind = TaskKind.BINARY, size: int = 60, seed: int = 0):
    from dse.data import SyntheticConfig

    return gen_synthetic(seed, size, task, SyntheticConfig(vocab_size=64, num_topics=4, topic_size=8, max_len=6))


def assert_bit_equal(a, b):
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape
    assert a.tobytes() == b.tobytes()
