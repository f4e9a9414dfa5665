import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dse.data import (
    Dataset,
    DatasetFormatError,
    SyntheticConfig,
    TaskKind,
    TrainingExample,
    format_dataset,
    gen_synthetic,
    jaccard,
    parse_dataset,
    random_sentences,
    save_dataset,
    split_indices,
)
from dse.encoder import UNK, InputError, Vocabulary


def _write(tmp_path, text, name="d.tsv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_task_kind_dimensions():
    assert [t.n for t in TaskKind] == [2, 3, 1]
    assert TaskKind.REGRESSION.is_classification is False


def test_parse_binary_row(tmp_path):
    vocab = Vocabulary(["hello", "world"])
    path = _write(tmp_path, "#dse-dataset v1 task=binary columns=sentence_a,sentence_b,label\nhello\tworld\t1\n")
    ds = parse_dataset(path, vocab)
    assert ds.task is TaskKind.BINARY
    assert ds.examples[0].sentence_a == [4] and ds.examples[0].sentence_b == [5]
    assert ds.examples[0].label == 1 and ds.examples[0].teacher_logits is None


def test_parse_regression_row(tmp_path):
    path = _write(tmp_path, "#dse-dataset v1 task=regression\na b\tc\t3.8\n")
    ds = parse_dataset(path)
    assert ds.examples[0].label == 3.8
    assert ds.examples[0].sentence_a == [UNK, UNK]


def test_parse_scored_rows(tmp_path):
    path = _write(tmp_path, "#dse-dataset v1 task=binary\nw5\tw6\t0\t0.25\t-1.5\n")
    ex = parse_dataset(path).examples[0]
    np.testing.assert_array_equal(ex.teacher_logits, [0.25, -1.5])


@pytest.mark.parametrize(
    "body, message",
    [
        ("w5\tw6\n", "line 2"),
        ("w5\tw6\t1\nw5\tw6\n", "line 3"),
        ("w5\tw6\t1\nw5\tw6\t1\t0.1\t0.2\n", "line 3"),
        ("w5\tw6\tx\n", "line 2"),
        ("w5\tw6\t2\n", "line 2"),
        ("w5\tw6\t1\t0.5\n", "line 2"),
    ],
)
def test_parse_errors_name_the_line(tmp_path, body, message):
    path = _write(tmp_path, "#dse-dataset v1 task=binary\n" + body)
    with pytest.raises(DatasetFormatError, match=message):
        parse_dataset(path)


def test_parse_header_errors(tmp_path):
    with pytest.raises(DatasetFormatError, match="unknown task"):
        parse_dataset(_write(tmp_path, "#dse-dataset v1 task=ranking\n"))
    with pytest.raises(DatasetFormatError, match="header"):
        parse_dataset(_write(tmp_path, "a\tb\t1\n"))
    with pytest.raises(DatasetFormatError, match="version"):
        parse_dataset(_write(tmp_path, "#dse-dataset v9 task=binary\n"))


@pytest.mark.parametrize("task", list(TaskKind))
def test_dataset_round_trip(tmp_path, task):
    ds = gen_synthetic(4, 30, task)
    rng = np.random.default_rng(0)
    for ex in ds:
        ex.teacher_logits = rng.normal(size=task.n)
    save_dataset(ds, tmp_path / "a.tsv")
    back = parse_dataset(tmp_path / "a.tsv")
    assert format_dataset(back) == format_dataset(ds)
    for x, y in zip(ds, back):
        assert x.sentence_a == y.sentence_a and x.sentence_b == y.sentence_b and x.label == y.label
        assert x.teacher_logits.tobytes() == y.teacher_logits.tobytes()


def test_example_validation():
    with pytest.raises(InputError):
        TrainingExample([5], [6], 2).validate(TaskKind.BINARY)
    with pytest.raises(InputError):
        TrainingExample([5], [6], float("nan")).validate(TaskKind.REGRESSION)
    with pytest.raises(InputError):
        TrainingExample([5], [6], 0, np.zeros(3)).validate(TaskKind.BINARY)
    TrainingExample([5], [6], 2, np.zeros(3)).validate(TaskKind.MULTICLASS)


@pytest.mark.parametrize("task", list(TaskKind))
def test_generator_deterministic(tmp_path, task):
    save_dataset(gen_synthetic(9, 50, task), tmp_path / "a.tsv")
    save_dataset(gen_synthetic(9, 50, task), tmp_path / "b.tsv")
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    save_dataset(gen_synthetic(10, 50, task), tmp_path / "c.tsv")
    assert (tmp_path / "a.tsv").read_bytes() != (tmp_path / "c.tsv").read_bytes()


def test_generator_labels():
    binary = gen_synthetic(0, 400, TaskKind.BINARY)
    labels = [ex.label for ex in binary]
    assert set(labels) == {0, 1} and 0.4 < np.mean(labels) < 0.6
    multi = gen_synthetic(0, 300, TaskKind.MULTICLASS)
    assert {ex.label for ex in multi} == {0, 1, 2}
    reg = gen_synthetic(0, 300, TaskKind.REGRESSION)
    values = [ex.label for ex in reg]
    assert all(0.0 <= v <= 1.0 for v in values)
    for ex in reg:
        assert ex.label == jaccard(ex.sentence_a, ex.sentence_b)


def test_generator_topics_drive_binary_label():
    cfg = SyntheticConfig(noise=0.0)
    ds = gen_synthetic(1, 200, TaskKind.BINARY, cfg)
    block = lambda t: (t - 4) // cfg.topic_size  # noqa: E731
    for ex in ds:
        same = {block(t) for t in ex.sentence_a} == {block(t) for t in ex.sentence_b}
        assert same == bool(ex.label)


def test_generator_rejects_tiny_sizes():
    with pytest.raises(ValueError):
        gen_synthetic(0, 9, TaskKind.BINARY)


def test_jaccard_bounds_and_identity():
    assert jaccard([5, 6, 6], [5, 6, 6]) == 1.0
    assert jaccard([5], [6]) == 0.0
    assert jaccard([5, 5, 6], [5, 6]) == pytest.approx(2 / 3)


@given(st.lists(st.integers(4, 20), min_size=1), st.lists(st.integers(4, 20), min_size=1))
def test_jaccard_symmetric_in_unit_interval(a, b):
    assert jaccard(a, b) == jaccard(b, a)
    assert 0.0 <= jaccard(a, b) <= 1.0
    assert jaccard(a, a) == 1.0


def test_split_indices_partition():
    train, dev = split_indices(100, 0.1, 3)
    assert len(dev) == 10 and len(train) == 90
    assert sorted(np.concatenate([train, dev]).tolist()) == list(range(100))
    t2, d2 = split_indices(100, 0.1, 3)
    assert np.array_equal(dev, d2)
    _, d3 = split_indices(100, 0.1, 4)
    assert not np.array_equal(dev, d3)
    with pytest.raises(ValueError):
        split_indices(100, 1.0, 0)


def test_random_sentences_deterministic():
    assert random_sentences(3, 20) == random_sentences(3, 20)
    assert all(1 <= len(s) for s in random_sentences(3, 20))


def test_dataset_subset_keeps_task_and_vocab():
    ds = gen_synthetic(0, 20, TaskKind.MULTICLASS)
    sub = ds.subset([1, 3])
    assert isinstance(sub, Dataset) and sub.task is ds.task and sub.vocab is ds.vocab and len(sub) == 2
