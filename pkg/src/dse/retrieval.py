"""Precomputed embedding index, pairwise/online scoring and the speed benchmark."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import model_fingerprint
from .data import SyntheticConfig, random_sentences
from .encoder import COUNTERS, EncoderConfig, InputError
from .student import StudentModel, embed_batch, embed_sentence, score_rows
from .teacher import TeacherModel, teacher_logits

INDEX_MAGIC = b"DSEIDX1"


class IndexFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingIndex:
    """Immutable ``N x d`` matrix of catalog embeddings, row ``i`` = sentence id ``i``."""

    matrix: np.ndarray
    fingerprint: str
    ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64, order="C", copy=True)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        ids = np.arange(len(m), dtype=np.int64)
        ids.flags.writeable = False
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.matrix)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_index(student: StudentModel, catalog: Sequence[Sequence[int]], workers: int = 1, batch_size: int = 256) -> EmbeddingIndex:
    """Embed the catalog with psi, one encoder pass per sentence.

    ``workers > 1`` embeds batches on a thread pool; weights are only read.
    """
    if len(catalog) == 0:
        raise InputError("catalog is empty")
    if workers <= 1:
        matrix = embed_batch(student, catalog, batch_size)
    else:
        chunks = [catalog[i : i + batch_size] for i in range(0, len(catalog), batch_size)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            matrix = np.concatenate(list(pool.map(lambda c: embed_batch(student, c, batch_size), chunks)))
    return EmbeddingIndex(matrix, model_fingerprint(student))


def save_index(index: EmbeddingIndex, path) -> None:
    header = json.dumps({"N": len(index), "d": index.dim, "fingerprint": index.fingerprint}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC + b"\n" + header.encode() + b"\n")
        fh.write(index.matrix.astype("<f8").tobytes())


def load_index(path) -> EmbeddingIndex:
    raw = Path(path).read_bytes()
    if not raw.startswith(INDEX_MAGIC + b"\n"):
        raise IndexFormatError("not an index file (bad magic)")
    start = len(INDEX_MAGIC) + 1
    end = raw.find(b"\n", start)
    if end < 0:
        raise IndexFormatError("truncated index header")
    try:
        header = json.loads(raw[start:end])
        n, d = int(header["N"]), int(header["d"])
    except (ValueError, KeyError) as exc:
        raise IndexFormatError(f"bad index header: {exc}") from None
    payload = raw[end + 1 :]
    if len(payload) != 8 * n * d:
        raise IndexFormatError(f"index payload is {len(payload)} bytes, expected {8 * n * d}")
    matrix = np.frombuffer(payload, dtype="<f8").reshape(n, d)
    return EmbeddingIndex(matrix, header["fingerprint"])


# --------------------------------------------------------------------------
# Scoring paths
# --------------------------------------------------------------------------


@dataclass
class PairwiseResult:
    scores: np.ndarray  # (N, N, n) logits; entry (i, j) scores (x_i, x_j)
    encoder_passes: int
    head_evals: int


def dse_pairwise(student: StudentModel, embeddings: np.ndarray, rows_per_chunk: int = 64) -> np.ndarray:
    """Head logits for every ordered pair of precomputed embeddings, ``(N, N, n)``."""
    n = len(embeddings)
    out = np.empty((n, n, student.task.n))
    for start in range(0, n, rows_per_chunk):
        stop = min(start + rows_per_chunk, n)
        u = np.repeat(embeddings[start:stop], n, axis=0)
        v = np.tile(embeddings, (stop - start, 1))
        out[start:stop] = score_rows(student, u, v).reshape(stop - start, n, -1)
    return out


def offline_pairwise(
    student: StudentModel | None,
    teacher: TeacherModel | None,
    catalog: Sequence[Sequence[int]],
    mode: str,
    batch_size: int = 256,
) -> PairwiseResult:
    """All ``N^2`` ordered pair scores (diagonal included) via the teacher or the DSE path."""
    if len(catalog) == 0:
        raise InputError("catalog is empty")
    passes0, heads0 = COUNTERS.snapshot()
    if mode == "teacher":
        pairs = [(a, b) for a in catalog for b in catalog]
        scores = teacher_logits(teacher, pairs, batch_size).reshape(len(catalog), len(catalog), -1)
    elif mode == "dse":
        emb = embed_batch(student, catalog, batch_size)
        scores = dse_pairwise(student, emb)
    else:
        raise ValueError(f"mode must be 'teacher' or 'dse', got {mode!r}")
    passes1, heads1 = COUNTERS.snapshot()
    return PairwiseResult(scores, passes1 - passes0, heads1 - heads0)


def rank(scores: np.ndarray, ids: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Top ``k`` by descending score, ties broken by ascending id."""
    order = np.lexsort((ids, -scores))[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


def online_query(
    index: EmbeddingIndex,
    student: StudentModel,
    q: Sequence[int],
    k: int,
    logit_index: int = -1,
) -> list[tuple[int, float]]:
    """Score ``q`` against every catalog row: one encoder pass plus ``N`` head evaluations."""
    if not 1 <= k <= len(index):
        raise InputError(f"k must lie in [1, {len(index)}], got {k}")
    uq = embed_sentence(student, q)
    u = np.broadcast_to(uq, index.matrix.shape)
    scores = score_rows(student, u, index.matrix)[:, logit_index]
    return rank(scores, index.ids, k)


# --------------------------------------------------------------------------
# Benchmark
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkScenario:
    kind: str = "online"  # "online" | "offline"
    n: int = 10_000
    teacher_batch: int = 256
    embed_batch: int = 256
    head_chunk: int = 256  # rows per head batch; larger blocks fall out of cache
    repeats: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.kind not in ("online", "offline"):
            raise ValueError(f"scenario must be 'online' or 'offline', got {self.kind!r}")
        if self.n < 1 or self.repeats < 1:
            raise ValueError("n and repeats must be positive")


@dataclass
class BenchmarkReport:
    scenario: str
    n: int
    teacher_time: float
    embed_time: float
    head_time: float
    speedup: float
    teacher_encoder_passes: int
    dse_encoder_passes: int
    head_evals: int
    teacher_batch: int
    embed_batch: int
    head_batch: int
    threads: int

    @property
    def dse_time(self) -> float:
        return self.embed_time + self.head_time

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        n_pairs = self.n * self.n if self.scenario == "offline" else self.n
        rows = [
            ("Model", "Speedup factor", "Time", "Batch size", "Encoder passes", "Head evals"),
            ("Teacher (cross-attentive)", "1", _fmt_time(self.teacher_time), str(self.teacher_batch), str(self.teacher_encoder_passes), "-"),
            ("DSE (psi phase)", "-", _fmt_time(self.embed_time), str(self.embed_batch), str(self.dse_encoder_passes), "-"),
            ("DSE (f phase)", "-", _fmt_time(self.head_time), str(self.head_batch), "-", str(self.head_evals)),
            ("DSE", f"{self.speedup:.1f}", _fmt_time(self.dse_time), "-", "-", "-"),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = [f"{self.scenario} scenario: N={self.n} ({n_pairs} pair scores)"]
        for r in rows:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        return "\n".join(lines)


def _fmt_time(seconds: float) -> str:
    return f"{seconds * 1e3:.2f}ms" if seconds < 1 else f"{seconds:.3f}s"


def _timed(fn):
    p0, h0 = COUNTERS.snapshot()
    t0 = time.perf_counter()
    out = fn()
    elapsed = time.perf_counter() - t0
    p1, h1 = COUNTERS.snapshot()
    return out, elapsed, p1 - p0, h1 - h0


def run_benchmark(
    scenario: BenchmarkScenario,
    teacher: TeacherModel | None = None,
    student: StudentModel | None = None,
    seed: int = 0,
    config: EncoderConfig | None = None,
    synthetic: SyntheticConfig | None = None,
) -> BenchmarkReport:
    """Time the cross-attentive path against the DSE path on a seeded catalog.

    Missing models are randomly initialised from ``seed``; timing does not
    depend on trained weights. Each path gets one untimed warmup batch, then
    ``repeats`` timed runs of which the fastest is reported. Encoder passes
    and head evaluations are exact counter deltas of a timed run.
    """
    from .data import TaskKind

    if config is None:
        config = teacher.config if teacher is not None else student.config if student is not None else EncoderConfig()
    if teacher is None:
        teacher = TeacherModel.init(config, TaskKind.BINARY, seed)
    if student is None:
        student = StudentModel.init(config, teacher.task, seed + 1)
    if teacher.config.vocab_size != student.config.vocab_size:
        raise InputError("teacher and student vocabularies differ")
    synthetic = synthetic or SyntheticConfig.for_vocab(config.vocab_size)
    n = scenario.n
    catalog = random_sentences(seed, n, synthetic)
    query = random_sentences(seed + 1, 1, synthetic)[0]

    if scenario.kind == "online":
        index = build_index(student, catalog, batch_size=scenario.embed_batch)
        pairs = [(query, x) for x in catalog]

        def teacher_path():
            return teacher_logits(teacher, pairs, scenario.teacher_batch)

        def embed_path():
            return embed_sentence(student, query)

        def head_path(uq):
            return score_rows(student, np.broadcast_to(uq, index.matrix.shape), index.matrix, scenario.head_chunk)

        warm_pairs = pairs[: scenario.teacher_batch]
    else:

        def teacher_path():
            return teacher_logits(teacher, [(a, b) for a in catalog for b in catalog], scenario.teacher_batch)

        def embed_path():
            return embed_batch(student, catalog, scenario.embed_batch)

        def head_path(emb):
            return dse_pairwise(student, emb, max(1, scenario.head_chunk // n))

        warm_pairs = [(catalog[0], x) for x in catalog[: scenario.teacher_batch]]

    with threadpool_limits(limits=scenario.threads):
        teacher_logits(teacher, warm_pairs, scenario.teacher_batch)
        warm_emb = embed_batch(student, catalog[: scenario.embed_batch], scenario.embed_batch)
        score_rows(student, warm_emb, warm_emb[::-1], scenario.head_chunk)

        best = None
        for _ in range(scenario.repeats):
            _, t_teacher, p_teacher, _ = _timed(teacher_path)
            emb, t_embed, p_dse, _ = _timed(embed_path)
            _, t_head, _, heads = _timed(lambda: head_path(emb))
            run = (t_teacher, t_embed, t_head, p_teacher, p_dse, heads)
            if best is None:
                best = list(run)
            else:
                best[0] = min(best[0], t_teacher)
                best[1] = min(best[1], t_embed)
                best[2] = min(best[2], t_head)
    t_teacher, t_embed, t_head, p_teacher, p_dse, heads = best
    head_batch = scenario.head_chunk if scenario.kind == "online" else max(1, scenario.head_chunk // n) * n
    return BenchmarkReport(
        scenario=scenario.kind,
        n=n,
        teacher_time=t_teacher,
        embed_time=t_embed,
        head_time=t_head,
        speedup=t_teacher / (t_embed + t_head),
        teacher_encoder_passes=p_teacher,
        dse_encoder_passes=p_dse,
        head_evals=heads,
        teacher_batch=scenario.teacher_batch,
        embed_batch=1 if scenario.kind == "online" else scenario.embed_batch,
        head_batch=min(head_batch, n * n if scenario.kind == "offline" else n),
        threads=scenario.threads,
    )
