"""Siamese student: one shared sentence encoder and a low-cost similarity head.

A sentence is wrapped as ``[CLS] y [SEP]`` (segment A only) and encoded; the
hidden states of the last ``P = min(4, L)`` layers are mean-pooled over real
non-CLS positions (SEP included) and concatenated into a ``d = P * H`` vector.
Two such vectors are scored by ``w . relu(W h)`` with
``h = [u, v, u * v, |u - v|]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import encoder as enc
from .data import TaskKind
from .encoder import COUNTERS, EncoderConfig, EncoderWeights, InputError, build_single_input
from .numkernel import Parameter, SeededRng, ShapeError, Tensor

EMBED_BATCH = 256
MAX_POOLED = 4


@dataclass
class StudentModel:
    encoder: EncoderWeights
    head_W: Parameter  # (r, 4d)
    head_w: Parameter  # (n, r)
    task: TaskKind
    pooled_layers: int

    def __post_init__(self):
        d4 = 4 * self.dim
        if self.head_W.shape[1] != d4:
            raise ShapeError(f"head_W input width {self.head_W.shape[1]} != 4d = {d4}")
        if self.head_w.shape != (self.task.n, self.head_W.shape[0]):
            raise ShapeError(f"head_w shape {self.head_w.shape} != ({self.task.n}, {self.head_W.shape[0]})")
        if not 1 <= self.pooled_layers <= self.encoder.config.num_layers:
            raise ValueError("pooled_layers must lie in [1, L]")

    @classmethod
    def init(
        cls,
        config: EncoderConfig,
        task: TaskKind,
        seed: int,
        head_hidden: int = 64,
        encoder: EncoderWeights | None = None,
    ) -> "StudentModel":
        """Fresh student; pass ``encoder`` (copied) to start from e.g. a teacher's encoder."""
        rng = SeededRng(seed)
        enc_weights = encoder.copy() if encoder is not None else EncoderWeights.init(config, rng.spawn(1))
        config = enc_weights.config
        p = min(MAX_POOLED, config.num_layers)
        d = p * config.hidden
        # Glorot-style scales keep head logits O(1) at init.
        head_W = Parameter(rng.spawn(2).normal((head_hidden, 4 * d), np.sqrt(2.0 / (4 * d + head_hidden))))
        head_w = Parameter(rng.spawn(3).normal((task.n, head_hidden), np.sqrt(2.0 / (head_hidden + task.n))))
        return cls(enc_weights, head_W, head_w, task, p)

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    @property
    def dim(self) -> int:
        return self.pooled_layers * self.encoder.config.hidden

    def parameters(self) -> dict[str, Parameter]:
        params = {f"enc.{k}": p for k, p in self.encoder.params.items()}
        params["head.W"] = self.head_W
        params["head.w"] = self.head_w
        return params

    def head_parameters(self) -> dict[str, Parameter]:
        return {"head.W": self.head_W, "head.w": self.head_w}

    def copy(self) -> "StudentModel":
        return StudentModel(self.encoder.copy(), self.head_W.copy(), self.head_w.copy(), self.task, self.pooled_layers)


# --------------------------------------------------------------------------
# Pooling
# --------------------------------------------------------------------------


def pool_weights(mask: np.ndarray) -> Tensor:
    """Per-position averaging weights: 1/count over real non-CLS positions, else 0."""
    w = mask.astype(np.float64)
    w[:, 0] = 0.0
    counts = w.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise InputError("sentence has no real positions after CLS")
    return w / counts


def pool(hidden: Sequence[Tensor], mask: np.ndarray, pooled_layers: int) -> Tensor:
    """Concatenate per-layer masked means of the last ``pooled_layers`` hidden states -> ``(B, P*H)``."""
    weights = pool_weights(mask)
    chosen = hidden[len(hidden) - pooled_layers :]
    return np.concatenate([np.einsum("bt,bth->bh", weights, h) for h in chosen], axis=1)


def pool_backward(d_emb: Tensor, mask: np.ndarray, pooled_layers: int, num_layers: int, hidden_size: int) -> dict[int, Tensor]:
    weights = pool_weights(mask)
    grads = {}
    for j in range(pooled_layers):
        layer = num_layers - pooled_layers + 1 + j
        grads[layer] = weights[:, :, None] * d_emb[:, None, j * hidden_size : (j + 1) * hidden_size]
    return grads


# --------------------------------------------------------------------------
# Embedding
# --------------------------------------------------------------------------


def embed_batch(s: StudentModel, sentences: Sequence[Sequence[int]], batch_size: int = EMBED_BATCH) -> Tensor:
    """``(N, d)`` embeddings; one encoder pass per sentence."""
    out = np.empty((len(sentences), s.dim))
    for start in range(0, len(sentences), batch_size):
        chunk = sentences[start : start + batch_size]
        ids, seg, mask = enc.stack_inputs([build_single_input(y, s.config.max_len) for y in chunk])
        hidden, _ = enc.forward(s.encoder, ids, seg, mask)
        out[start : start + len(chunk)] = pool(hidden, mask, s.pooled_layers)
    return out


def embed_sentence(s: StudentModel, y: Sequence[int]) -> Tensor:
    """The sentence embedding psi(y), shape ``(d,)``."""
    if len(y) == 0:
        raise InputError("cannot embed an empty sentence")
    return embed_batch(s, [y])[0]


def embed_from_hidden(hidden: Sequence[Tensor], mask: np.ndarray, pooled_layers: int) -> Tensor:
    """Pooling applied to precomputed hidden states of a single sequence (``(T, H)`` each)."""
    return pool([h[None] for h in hidden], mask[None], pooled_layers)[0]


# --------------------------------------------------------------------------
# Similarity head
# --------------------------------------------------------------------------


def pair_features(u: Tensor, v: Tensor) -> Tensor:
    """h = [u, v, u * v, |u - v|] along the last axis."""
    return np.concatenate([u, v, u * v, np.abs(u - v)], axis=-1)


@dataclass
class HeadCache:
    u: Tensor
    v: Tensor
    h: Tensor
    z: Tensor
    a: Tensor


def head_forward(s: StudentModel, u: Tensor, v: Tensor) -> tuple[Tensor, HeadCache]:
    if u.shape != v.shape or u.shape[-1] != s.dim:
        raise ShapeError(f"embedding shapes {u.shape} and {v.shape} do not match d={s.dim}")
    h = pair_features(u, v)
    z = h @ s.head_W.value.T
    a = np.maximum(z, 0.0)
    logits = a @ s.head_w.value.T
    COUNTERS.add_head_evals(1 if u.ndim == 1 else u.shape[0])
    return logits, HeadCache(u, v, h, z, a)


def head_backward(s: StudentModel, dlogits: Tensor, cache: HeadCache) -> tuple[Tensor, Tensor]:
    """Accumulate head gradients; returns gradients w.r.t. u and v."""
    d = s.dim
    s.head_w.grad += dlogits.T @ cache.a
    dz = (dlogits @ s.head_w.value) * (cache.z > 0.0)
    s.head_W.grad += dz.T @ cache.h
    dh = dz @ s.head_W.value
    sign = np.sign(cache.u - cache.v)
    du = dh[:, :d] + dh[:, 2 * d : 3 * d] * cache.v + dh[:, 3 * d :] * sign
    dv = dh[:, d : 2 * d] + dh[:, 2 * d : 3 * d] * cache.u - dh[:, 3 * d :] * sign
    return du, dv


def similarity_head(s: StudentModel, u: Tensor, v: Tensor) -> Tensor:
    """Logits ``w . relu(W [u, v, u*v, |u-v|])``; batched over leading rows if given."""
    return head_forward(s, u, v)[0]


def score_rows(s: StudentModel, u: Tensor, v: Tensor, chunk: int = 256) -> Tensor:
    """Head logits for many ``(u_i, v_i)`` rows, chunked to bound memory."""
    out = np.empty((len(u), s.task.n))
    for start in range(0, len(u), chunk):
        out[start : start + chunk] = similarity_head(s, u[start : start + chunk], v[start : start + chunk])
    return out


def student_score(s: StudentModel, y: Sequence[int], z: Sequence[int]) -> Tensor:
    """S(y, z) = f(psi(y), psi(z)): two encoder passes and one head evaluation."""
    return similarity_head(s, embed_sentence(s, y), embed_sentence(s, z))


def student_logits(s: StudentModel, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], batch_size: int = EMBED_BATCH) -> Tensor:
    """``(N, n)`` student logits for many pairs (2N encoder passes, N head evaluations)."""
    half = max(1, batch_size // 2)
    out = np.empty((len(pairs), s.task.n))
    for start in range(0, len(pairs), half):
        chunk = pairs[start : start + half]
        emb = embed_batch(s, [a for a, _ in chunk] + [b for _, b in chunk], batch_size)
        out[start : start + len(chunk)] = similarity_head(s, emb[: len(chunk)], emb[len(chunk) :])
    return out


def student_forward_backward(
    s: StudentModel,
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
    loss_grad,
    train_encoder: bool = True,
    kinks: list | None = None,
    backward: bool = True,
) -> float:
    """Forward a batch of pairs, apply ``loss_grad(logits) -> (mean_loss, dlogits)``, backprop.

    Head gradients are always accumulated when ``backward``; encoder gradients
    only when ``train_encoder`` as well.
    """
    b = len(pairs)
    inputs = [build_single_input(y, s.config.max_len) for y, _ in pairs] + [
        build_single_input(z, s.config.max_len) for _, z in pairs
    ]
    ids, seg, mask = enc.stack_inputs(inputs)
    keep = backward and train_encoder
    hidden, cache = enc.forward(s.encoder, ids, seg, mask, keep_cache=keep, kinks=kinks)
    emb = pool(hidden, mask, s.pooled_layers)
    logits, hcache = head_forward(s, emb[:b], emb[b:])
    if kinks is not None:
        kinks.append(hcache.z > 0.0)
        kinks.append(hcache.u > hcache.v)  # |u - v| has a kink at u == v
    loss, dlogits = loss_grad(logits)
    if backward:
        du, dv = head_backward(s, dlogits, hcache)
        if train_encoder:
            d_emb = np.concatenate([du, dv], axis=0)
            grads = pool_backward(d_emb, mask, s.pooled_layers, s.config.num_layers, s.config.hidden)
            enc.backward(s.encoder, cache, grads)
    return loss
