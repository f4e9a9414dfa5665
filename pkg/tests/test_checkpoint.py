import json

import pytest

from conftest import TINY, assert_bit_equal
from dse.checkpoint import (
    MAGIC,
    CorruptCheckpointError,
    IncompatibleCheckpointError,
    checkpoint_bytes,
    load_checkpoint,
    model_fingerprint,
    save_checkpoint,
)
from dse.data import TaskKind
from dse.student import StudentModel, student_score
from dse.teacher import TeacherModel, teacher_score


@pytest.mark.parametrize("kind", ["teacher", "student"])
@pytest.mark.parametrize("task", list(TaskKind))
def test_save_load_save_byte_identical(tmp_path, kind, task):
    model = TeacherModel.init(TINY, task, 1) if kind == "teacher" else StudentModel.init(TINY, task, 1, head_hidden=7)
    save_checkpoint(model, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert type(back) is type(model) and back.task is task
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert model_fingerprint(back) == model_fingerprint(model)


def test_reloaded_models_score_bit_identically(tmp_path):
    s = StudentModel.init(TINY, TaskKind.MULTICLASS, 2)
    t = TeacherModel.init(TINY, TaskKind.MULTICLASS, 2)
    save_checkpoint(s, tmp_path / "s.ckpt")
    save_checkpoint(t, tmp_path / "t.ckpt")
    s2, t2 = load_checkpoint(tmp_path / "s.ckpt"), load_checkpoint(tmp_path / "t.ckpt")
    for a, b in [([5, 6, 7], [8]), ([9], [9, 10])]:
        assert_bit_equal(student_score(s, a, b), student_score(s2, a, b))
        assert_bit_equal(teacher_score(t, a, b), teacher_score(t2, a, b))


@pytest.mark.parametrize("cut", [3, len(MAGIC) + 5, -1, -100])
def test_truncated_file_is_corrupt(tmp_path, cut):
    raw = checkpoint_bytes(StudentModel.init(TINY, TaskKind.BINARY, 0))
    (tmp_path / "x.ckpt").write_bytes(raw[:cut])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_flipped_payload_byte_is_corrupt(tmp_path):
    raw = bytearray(checkpoint_bytes(TeacherModel.init(TINY, TaskKind.BINARY, 0)))
    raw[-10] ^= 0xFF
    (tmp_path / "x.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "x.ckpt")


def test_version_mismatch_is_incompatible(tmp_path):
    raw = checkpoint_bytes(TeacherModel.init(TINY, TaskKind.BINARY, 0))
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC) : end])
    header["version"] = 99
    (tmp_path / "x.ckpt").write_bytes(MAGIC + json.dumps(header).encode() + raw[end:])
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")
    (tmp_path / "y.ckpt").write_bytes(b"DSECKPT2\n" + raw[len(MAGIC) :])
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "y.ckpt")


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"hello")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_fingerprint_changes_with_weights():
    s = StudentModel.init(TINY, TaskKind.BINARY, 0)
    s2 = s.copy()
    s2.head_w.value[0, 0] += 1e-12
    assert model_fingerprint(s) != model_fingerprint(s2)
