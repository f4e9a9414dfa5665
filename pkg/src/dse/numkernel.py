"""Numeric core: float64 tensors, differentiable primitives, Adam, gradient checks.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 in C (row-major)
order. Every forward primitive here has a matching ``*_backward`` that takes the
upstream gradient plus whatever the forward cached.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Tensor = np.ndarray

# Additive attention bias for masked keys. Finite so intermediate tensors stay
# finite, large enough that exp() underflows to exactly 0.0 after max-subtraction.
MASK_BIAS = -1.0e30


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible."""


class GradientCheckError(RuntimeError):
    """Raised when a loss evaluated during a gradient check is not finite."""


def tensor(data, shape: Iterable[int] | None = None) -> Tensor:
    """Build a contiguous float64 tensor, optionally reshaped."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if shape is not None:
        shape = tuple(shape)
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    return arr


# --------------------------------------------------------------------------
# Seeded randomness
# --------------------------------------------------------------------------


class SeededRng:
    """Deterministic random source.

    Backed by the PCG64 bit generator (O'Neill's permuted congruential
    generator, 128-bit state, XSL-RR output) as shipped with numpy. PCG64's
    raw stream is fixed for a given seed on every platform numpy supports.
    All randomness in this package is drawn through instances of this class.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std: float = 1.0) -> Tensor:
        return np.ascontiguousarray(self._gen.standard_normal(size=shape) * std)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq, size=None, replace: bool = True, p=None):
        return self._gen.choice(seq, size=size, replace=replace, p=p)

    def spawn(self, salt: int) -> "SeededRng":
        """Derive an independent child stream from this seed and a salt."""
        mixed = np.random.SeedSequence([self.seed, int(salt)]).generate_state(2, dtype=np.uint32)
        return SeededRng(int(mixed[0]) << 32 | int(mixed[1]))


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """c[i, j] = sum_t a[i, t] * b[t, j] for 2-D operands."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return np.ascontiguousarray(a @ b)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad_out: Tensor, probs: Tensor) -> Tensor:
    return probs * (grad_out - (probs * grad_out).sum(axis=-1, keepdims=True))


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    return grad_out * (x > 0.0)


@dataclass
class LayerNormCache:
    xhat: Tensor
    inv_std: Tensor
    gamma: Tensor


def layer_norm_forward(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> tuple[Tensor, LayerNormCache]:
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm gamma/beta {gamma.shape}/{beta.shape} do not match rows of {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gamma + beta, LayerNormCache(xhat, inv_std, gamma)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    return layer_norm_forward(x, gamma, beta, eps)[0]


def layer_norm_backward(grad_out: Tensor, cache: LayerNormCache) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat = cache.xhat
    lead = tuple(range(grad_out.ndim - 1))
    grad_gamma = (grad_out * xhat).sum(axis=lead)
    grad_beta = grad_out.sum(axis=lead)
    g = grad_out * cache.gamma
    grad_x = cache.inv_std * (
        g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)
    )
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# Parameters and Adam
# --------------------------------------------------------------------------


@dataclass
class Parameter:
    value: Tensor
    grad: Tensor = field(default=None)  # type: ignore[assignment]
    adam_m: Tensor = field(default=None)  # type: ignore[assignment]
    adam_v: Tensor = field(default=None)  # type: ignore[assignment]
    step_count: int = 0

    def __post_init__(self):
        self.value = tensor(self.value)
        for name in ("grad", "adam_m", "adam_v"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.value))
            elif getattr(self, name).shape != self.value.shape:
                raise ShapeError(f"{name} shape {getattr(self, name).shape} != value shape {self.value.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def copy(self) -> "Parameter":
        return Parameter(
            self.value.copy(), self.grad.copy(), self.adam_m.copy(), self.adam_v.copy(), self.step_count
        )


def adam_step(
    p: Parameter,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Parameter:
    """One bias-corrected Adam update in place; zeroes the gradient afterwards."""
    if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
        raise ValueError("Adam betas must lie in (0, 1)")
    if lr < 0.0 or eps <= 0.0:
        raise ValueError("Adam requires lr >= 0 and eps > 0")
    p.step_count += 1
    t = p.step_count
    g = p.grad
    p.adam_m *= beta1
    p.adam_m += (1.0 - beta1) * g
    p.adam_v *= beta2
    p.adam_v += (1.0 - beta2) * (g * g)
    m_hat = p.adam_m / (1.0 - beta1**t)
    v_hat = p.adam_v / (1.0 - beta2**t)
    p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    p.zero_grad()
    return p


# --------------------------------------------------------------------------
# Finite-difference gradient verification
# --------------------------------------------------------------------------


@dataclass
class OverTolerance:
    """A checked coordinate whose relative error exceeded the tolerance."""

    name: str
    index: int
    abs_error: float
    roundoff: float  # rounding-noise bound of the central difference at step h
    refined_rel_error: float | None  # relative error at step h / 10 (None: kink in the way)
    refined_abs_error: float | None
    refined_roundoff: float | None
    tol: float

    @property
    def explained(self) -> bool:
        """Float64 rounding or O(h^2) truncation accounts for the disagreement."""
        if self.abs_error <= self.roundoff:
            return True
        if self.refined_rel_error is None:
            return False
        return self.refined_rel_error <= self.tol or self.refined_abs_error <= self.refined_roundoff


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: dict[str, float]
    worst: tuple[str, int] | None = None
    checked: int = 0
    kink_retries: int = 0
    skipped: list[tuple[str, int]] = field(default_factory=list)
    over_tol: list[OverTolerance] = field(default_factory=list)

    @property
    def unexplained(self) -> list[OverTolerance]:
        """Coordinates over tolerance that neither rounding nor step refinement accounts for."""
        return [c for c in self.over_tol if not c.explained]


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    denom = max(abs(analytic), abs(numeric))
    err = abs(analytic - numeric)
    return err if denom < floor else err / denom


# The central difference of a float64 loss carries an absolute error of about
# ulps * eps * |loss| / h from rounding alone. 64 ulps covers the rounding
# accumulated through a desk-scale forward pass with a wide margin while
# staying orders of magnitude below typical gradient entries.
ROUNDOFF_ULPS = 64.0


def _evaluate(loss_fn):
    out = loss_fn()
    if isinstance(out, tuple):
        return float(out[0]), out[1]
    return float(out), None


def kink_signature(kinks: Sequence[np.ndarray]) -> np.ndarray:
    """Flatten collected ReLU/abs activation states into one boolean vector."""
    return np.concatenate([np.asarray(k, dtype=bool).ravel() for k in kinks]) if kinks else np.zeros(0, dtype=bool)


def _central(loss_fn, flat: np.ndarray, idx: int, step: float, base_sig, label: str):
    """Central difference at ``step`` and its roundoff bound; None if a probe crosses a kink."""
    orig = flat[idx]
    flat[idx] = orig + step
    up, sig_up = _evaluate(loss_fn)
    flat[idx] = orig - step
    down, sig_down = _evaluate(loss_fn)
    flat[idx] = orig
    if not (np.isfinite(up) and np.isfinite(down)):
        raise GradientCheckError(f"non-finite loss while perturbing {label}: {up}, {down}")
    if base_sig is not None and not (np.array_equal(sig_up, base_sig) and np.array_equal(sig_down, base_sig)):
        return None
    noise = ROUNDOFF_ULPS * np.finfo(np.float64).eps * max(abs(up), abs(down)) / (2.0 * step)
    return (up - down) / (2.0 * step), noise


def finite_diff_check(
    loss_fn: Callable[[], float | tuple[float, Tensor]],
    params: Mapping[str, Parameter],
    h: float = 1e-5,
    samples: int = 64,
    seed: int = 0,
    analytic: Mapping[str, Tensor] | None = None,
    detail: bool = False,
    max_shrink: int = 3,
    tol: float = 1e-5,
):
    """Compare analytic gradients against central differences.

    ``loss_fn`` evaluates the loss from the current parameter values. It may
    return ``(loss, signature)`` where ``signature`` is a boolean array of
    ReLU activation states; a coordinate whose ``x +/- h`` probes change the
    signature straddles a kink, so its difference is redone with ``h / 10``
    (up to ``max_shrink`` times) and skipped if every step still straddles one.

    The analytic gradient is read from ``analytic`` when given, else from each
    parameter's ``grad``. Up to ``samples`` coordinates per tensor are checked,
    chosen with a fixed seed. Returns the maximum relative error, or a
    :class:`GradCheckResult` when ``detail`` is set.

    Coordinates whose relative error exceeds ``tol`` are recorded in
    ``over_tol`` with two diagnostics: the rounding-noise bound
    ``ROUNDOFF_ULPS * eps * max(|loss(x+h)|, |loss(x-h)|) / (2h)``, and the
    error of a second difference at ``h / 10``. A gradient entry far below the
    noise bound cannot be resolved to ``tol`` in float64 at step ``h``; an
    error that collapses on refinement is O(h^2) truncation. Anything else is
    listed by ``unexplained``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = SeededRng(seed)
    grads = {name: (analytic[name] if analytic is not None else p.grad).copy() for name, p in params.items()}
    _, base_sig = _evaluate(loss_fn)
    result = GradCheckResult(0.0, {})
    for name, p in params.items():
        flat = p.value.reshape(-1)
        size = flat.size
        coords = np.arange(size) if size <= samples else np.sort(rng.choice(size, size=samples, replace=False))
        g = grads[name].reshape(-1)
        param_err = 0.0
        for idx in coords:
            label = f"{name}[{idx}]"
            step = h
            probe = None
            for attempt in range(max_shrink + 1):
                probe = _central(loss_fn, flat, idx, step, base_sig, label)
                if probe is not None:
                    break
                result.kink_retries += 1
                step /= 10.0
            if probe is None:
                result.skipped.append((name, int(idx)))
                continue
            numeric, noise = probe
            result.checked += 1
            analytic_value = float(g[idx])
            err = relative_error(analytic_value, numeric)
            if err > tol:
                refined = _central(loss_fn, flat, idx, step / 10.0, base_sig, label)
                r_rel = r_abs = r_noise = None
                if refined is not None:
                    r_rel = relative_error(analytic_value, refined[0])
                    r_abs, r_noise = abs(analytic_value - refined[0]), refined[1]
                result.over_tol.append(
                    OverTolerance(name, int(idx), abs(analytic_value - numeric), noise, r_rel, r_abs, r_noise, tol)
                )
            param_err = max(param_err, err)
            if err > result.max_rel_error:
                result.max_rel_error, result.worst = err, (name, int(idx))
        result.per_param[name] = param_err
    return result if detail else result.max_rel_error


# --------------------------------------------------------------------------
# Row-wise losses (value and gradient w.r.t. the first argument)
# --------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, Tensor]:
    """Categorical cross-entropy of softmax(logits) against class indices, per row."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax_rows(logits)
    rows = np.arange(len(labels))
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return -logp[rows, labels], grad


def squared_l2(pred: Tensor, target: Tensor) -> tuple[Tensor, Tensor]:
    """||pred - target||^2 per row."""
    diff = pred - target
    return (diff * diff).sum(axis=-1), 2.0 * diff
