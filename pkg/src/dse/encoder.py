"""Tokenization, input assembly and the bidirectional transformer encoder.

The encoder is a post-layer-norm BERT-style stack with learned absolute
position embeddings and ReLU feed-forward sublayers. The forward pass runs on
padded batches ``(B, T)`` and returns the embedding output plus every layer's
hidden states; the backward pass accepts gradients on any subset of those.
"""

from __future__ import annotations

import math
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numkernel import (
    MASK_BIAS,
    LayerNormCache,
    Parameter,
    SeededRng,
    Tensor,
    layer_norm_backward,
    layer_norm_forward,
    softmax_backward,
    softmax_rows,
)

PAD, CLS, SEP, UNK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[CLS]", "[SEP]", "[UNK]")


class InputError(ValueError):
    """Invalid model input (bad ids, lengths, empty sentences)."""


# --------------------------------------------------------------------------
# Operation counters
# --------------------------------------------------------------------------


class OpCounters:
    """Monotone counters for encoder passes and similarity-head evaluations.

    One encoder pass is one sequence pushed through the encoder, however it
    is batched. One head evaluation is one (u, v) row scored by the head.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.encoder_passes = 0
        self.head_evals = 0

    def add_passes(self, n: int) -> None:
        with self._lock:
            self.encoder_passes += n

    def add_head_evals(self, n: int) -> None:
        with self._lock:
            self.head_evals += n

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self.encoder_passes, self.head_evals


COUNTERS = OpCounters()


# --------------------------------------------------------------------------
# Vocabulary and tokenization
# --------------------------------------------------------------------------


class Vocabulary:
    """Token to id map with PAD=0, CLS=1, SEP=2, UNK=3 reserved."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self._ids: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in self._ids or tok in RESERVED:
                raise ValueError(f"duplicate or reserved token {tok!r}")
            self._ids[tok] = i + len(RESERVED)

    def __len__(self) -> int:
        return len(self.tokens) + len(RESERVED)

    @property
    def size(self) -> int:
        return len(self)

    def lookup(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token(self, idx: int) -> str:
        if idx < len(RESERVED):
            return RESERVED[idx]
        return self.tokens[idx - len(RESERVED)]

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.token(i) for i in ids)

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        """Vocabulary ``w4 .. w{size-1}`` so that token ``w{i}`` has id ``i``."""
        return cls([f"w{i}" for i in range(len(RESERVED), size)])

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.lookup(tok) for tok in text.split()]


# --------------------------------------------------------------------------
# Inputs
# --------------------------------------------------------------------------


@dataclass
class SequenceInput:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def length(self) -> int:
        """Number of real (non-PAD) positions."""
        return int(self.mask.sum())


def _padded(tokens: list[int], segments: list[int], max_len: int) -> SequenceInput:
    n = len(tokens)
    pad = max_len - n
    return SequenceInput(
        np.array(tokens + [PAD] * pad, dtype=np.int64),
        np.array(segments + [0] * pad, dtype=np.int64),
        np.array([1] * n + [0] * pad, dtype=np.int64),
    )


def build_pair_input(a: Sequence[int], b: Sequence[int], max_len: int) -> SequenceInput:
    """``[CLS] a [SEP] b [SEP]`` padded to ``max_len``.

    When too long, the trailing token of whichever sentence is currently longer
    is dropped (``a`` on ties) until the pair fits.
    """
    if max_len < 5:
        raise InputError(f"max_len={max_len} cannot hold CLS + 1 + SEP + 1 + SEP")
    a, b = list(a), list(b)
    if not a or not b:
        raise InputError("both sentences of a pair must be nonempty")
    budget = max_len - 3
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    tokens = [CLS] + a + [SEP] + b + [SEP]
    segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    return _padded(tokens, segments, max_len)


def build_single_input(y: Sequence[int], max_len: int) -> SequenceInput:
    """``[CLS] y [SEP]`` with segment A everywhere, padded to ``max_len``."""
    if max_len < 3:
        raise InputError(f"max_len={max_len} cannot hold CLS + 1 + SEP")
    y = list(y)[: max_len - 2]
    if not y:
        raise InputError("sentence must be nonempty")
    tokens = [CLS] + y + [SEP]
    return _padded(tokens, [0] * len(tokens), max_len)


def stack_inputs(inputs: Sequence[SequenceInput], trim: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack inputs into ``(B, T)`` arrays; ``trim`` drops columns that are PAD in every row."""
    ids = np.stack([x.token_ids for x in inputs])
    seg = np.stack([x.segment_ids for x in inputs])
    mask = np.stack([x.mask for x in inputs])
    if trim:
        t = int(mask.sum(axis=1).max())
        ids, seg, mask = ids[:, :t], seg[:, :t], mask[:, :t]
    return ids, seg, mask


# --------------------------------------------------------------------------
# Configuration and weights
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn: int = 256
    max_len: int = 32
    vocab_size: int = 512
    num_segments: int = 2
    ln_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.max_len < 3:
            raise ValueError("max_len must be at least 3")
        if min(self.num_layers, self.hidden, self.ffn, self.vocab_size) < 1:
            raise ValueError("encoder dimensions must be positive")
        if self.vocab_size <= len(RESERVED):
            raise ValueError("vocab_size must exceed the reserved ids")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


_LAYER_SHAPES = (
    ("attn.wq", "HH"), ("attn.bq", "H"),
    ("attn.wk", "HH"), ("attn.bk", "H"),
    ("attn.wv", "HH"), ("attn.bv", "H"),
    ("attn.wo", "HH"), ("attn.bo", "H"),
    ("ln1.g", "H"), ("ln1.b", "H"),
    ("ffn.w1", "HF"), ("ffn.b1", "F"),
    ("ffn.w2", "FH"), ("ffn.b2", "H"),
    ("ln2.g", "H"), ("ln2.b", "H"),
)


def parameter_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    dims = {"H": cfg.hidden, "F": cfg.ffn}
    shapes = {
        "emb.tok": (cfg.vocab_size, cfg.hidden),
        "emb.pos": (cfg.max_len, cfg.hidden),
        "emb.seg": (cfg.num_segments, cfg.hidden),
        "emb.ln.g": (cfg.hidden,),
        "emb.ln.b": (cfg.hidden,),
    }
    for i in range(cfg.num_layers):
        for name, spec in _LAYER_SHAPES:
            shapes[f"layer{i}.{name}"] = tuple(dims[c] for c in spec)
    return shapes


class EncoderWeights:
    """All parameters of one encoder, keyed by dotted names."""

    def __init__(self, config: EncoderConfig, params: dict[str, Parameter]):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            raise ValueError("parameter names do not match config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape} != {shape}")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: EncoderConfig, rng: SeededRng) -> "EncoderWeights":
        params = {}
        for name, shape in parameter_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                value = np.ones(shape)
            elif leaf.startswith("b") and len(shape) == 1:
                value = np.zeros(shape)
            else:
                value = rng.normal(shape, config.init_std)
            params[name] = Parameter(value)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].value

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(self.config, {k: p.copy() for k, p in self.params.items()})


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


@dataclass
class _LayerCache:
    x: Tensor
    q: Tensor
    k: Tensor
    v: Tensor
    probs: Tensor
    ctx: Tensor
    ln1: LayerNormCache
    y1: Tensor
    z: Tensor
    r: Tensor
    ln2: LayerNormCache


@dataclass
class EncoderCache:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    emb_ln: LayerNormCache
    layers: list


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    lead = x.shape[:-1]
    return (x.reshape(-1, x.shape[-1]) @ w + b).reshape(*lead, w.shape[1])


def _outer_sum(x: Tensor, d: Tensor) -> Tensor:
    """sum over batch and position of x[..., i] * d[..., j]."""
    return x.reshape(-1, x.shape[-1]).T @ d.reshape(-1, d.shape[-1])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, h = x.shape
    return x.reshape(b, t, heads, h // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, a, t, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, a * d)


def _validate(weights: EncoderWeights, ids: np.ndarray, seg: np.ndarray, mask: np.ndarray) -> None:
    cfg = weights.config
    if ids.shape != seg.shape or ids.shape != mask.shape or ids.ndim != 2:
        raise InputError(f"token/segment/mask shapes disagree: {ids.shape}, {seg.shape}, {mask.shape}")
    if ids.shape[1] > cfg.max_len:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    if seg.size and (seg.min() < 0 or seg.max() >= cfg.num_segments):
        raise InputError(f"segment id out of range [0, {cfg.num_segments})")


def forward(
    weights: EncoderWeights,
    token_ids: np.ndarray,
    segment_ids: np.ndarray,
    mask: np.ndarray,
    keep_cache: bool = False,
    kinks: list | None = None,
) -> tuple[list[Tensor], EncoderCache | None]:
    """Run the encoder on a ``(B, T)`` batch.

    Returns ``L + 1`` hidden-state tensors of shape ``(B, T, H)``: the
    normalized embeddings followed by each layer's output. When ``kinks`` is
    a list, the ReLU activation pattern at real positions is appended to it.
    """
    _validate(weights, token_ids, segment_ids, mask)
    cfg = weights.config
    w = weights.params
    bsz, t = token_ids.shape
    COUNTERS.add_passes(bsz)

    emb = w["emb.tok"].value[token_ids] + w["emb.pos"].value[:t] + w["emb.seg"].value[segment_ids]
    x, emb_ln = layer_norm_forward(emb, w["emb.ln.g"].value, w["emb.ln.b"].value, cfg.ln_eps)
    hidden = [x]
    layers = []
    bias = np.where(mask[:, None, None, :] > 0, 0.0, MASK_BIAS)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    for i in range(cfg.num_layers):
        p = lambda n: w[f"layer{i}.{n}"].value  # noqa: E731
        q = _split_heads(_linear(x, p("attn.wq"), p("attn.bq")), cfg.heads)
        k = _split_heads(_linear(x, p("attn.wk"), p("attn.bk")), cfg.heads)
        v = _split_heads(_linear(x, p("attn.wv"), p("attn.bv")), cfg.heads)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + bias
        probs = softmax_rows(scores)
        ctx = _merge_heads(probs @ v)
        attn_out = _linear(ctx, p("attn.wo"), p("attn.bo"))
        y1, ln1 = layer_norm_forward(x + attn_out, p("ln1.g"), p("ln1.b"), cfg.ln_eps)
        z = _linear(y1, p("ffn.w1"), p("ffn.b1"))
        r = np.maximum(z, 0.0)
        if kinks is not None:
            kinks.append((z > 0.0)[mask > 0])
        f = _linear(r, p("ffn.w2"), p("ffn.b2"))
        y2, ln2 = layer_norm_forward(y1 + f, p("ln2.g"), p("ln2.b"), cfg.ln_eps)
        if keep_cache:
            layers.append(_LayerCache(x, q, k, v, probs, ctx, ln1, y1, z, r, ln2))
        hidden.append(y2)
        x = y2
    cache = EncoderCache(token_ids, segment_ids, emb_ln, layers) if keep_cache else None
    return hidden, cache


def backward(weights: EncoderWeights, cache: EncoderCache, grad_hidden: dict[int, Tensor]) -> None:
    """Accumulate parameter gradients given gradients on hidden states.

    ``grad_hidden`` maps a hidden-state index (0 = embeddings, ``l`` = output
    of layer ``l``) to a ``(B, T, H)`` gradient.
    """
    cfg = weights.config
    w = weights.params
    scale = 1.0 / math.sqrt(cfg.head_dim)
    top = max(grad_hidden)
    dx = grad_hidden[top].copy()
    for i in reversed(range(top)):
        c = cache.layers[i]
        name = lambda n: f"layer{i}.{n}"  # noqa: E731
        val = lambda n: w[name(n)].value  # noqa: E731

        def acc(n, g):
            w[name(n)].grad += g

        # second sublayer
        ds2, dg, db = layer_norm_backward(dx, c.ln2)
        acc("ln2.g", dg)
        acc("ln2.b", db)
        acc("ffn.w2", _outer_sum(c.r, ds2))
        acc("ffn.b2", ds2.sum(axis=(0, 1)))
        dz = (ds2 @ val("ffn.w2").T) * (c.z > 0.0)
        acc("ffn.w1", _outer_sum(c.y1, dz))
        acc("ffn.b1", dz.sum(axis=(0, 1)))
        dy1 = ds2 + dz @ val("ffn.w1").T
        # first sublayer
        ds1, dg, db = layer_norm_backward(dy1, c.ln1)
        acc("ln1.g", dg)
        acc("ln1.b", db)
        acc("attn.wo", _outer_sum(c.ctx, ds1))
        acc("attn.bo", ds1.sum(axis=(0, 1)))
        dctx = _split_heads(ds1 @ val("attn.wo").T, cfg.heads)
        dprobs = dctx @ c.v.transpose(0, 1, 3, 2)
        dv = c.probs.transpose(0, 1, 3, 2) @ dctx
        dscores = softmax_backward(dprobs, c.probs) * scale
        dq = dscores @ c.k
        dk = dscores.transpose(0, 1, 3, 2) @ c.q
        dx_new = ds1
        for proj, d in (("q", dq), ("k", dk), ("v", dv)):
            d = _merge_heads(d)
            acc(f"attn.w{proj}", _outer_sum(c.x, d))
            acc(f"attn.b{proj}", d.sum(axis=(0, 1)))
            dx_new = dx_new + d @ val(f"attn.w{proj}").T
        dx = dx_new
        if i in grad_hidden:
            dx = dx + grad_hidden[i]
    demb, dg, db = layer_norm_backward(dx, cache.emb_ln)
    w["emb.ln.g"].grad += dg
    w["emb.ln.b"].grad += db
    t = demb.shape[1]
    np.add.at(w["emb.tok"].grad, cache.token_ids.reshape(-1), demb.reshape(-1, cfg.hidden))
    w["emb.pos"].grad[:t] += demb.sum(axis=0)
    np.add.at(w["emb.seg"].grad, cache.segment_ids.reshape(-1), demb.reshape(-1, cfg.hidden))


def encode(inp: SequenceInput, weights: EncoderWeights) -> list[Tensor]:
    """Hidden states for a single input: ``L + 1`` matrices of shape ``(len(inp), H)``."""
    hidden, _ = forward(weights, inp.token_ids[None, :], inp.segment_ids[None, :], inp.mask[None, :])
    return [h[0] for h in hidden]


def encode_batch(inputs: Sequence[SequenceInput], weights: EncoderWeights) -> tuple[list[Tensor], np.ndarray]:
    """Encode several inputs at once; returns trimmed hidden states and the trimmed mask."""
    ids, seg, mask = stack_inputs(inputs)
    hidden, _ = forward(weights, ids, seg, mask)
    return hidden, mask
