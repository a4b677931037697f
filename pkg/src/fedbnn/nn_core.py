"""Dense-network numerics on flat float64 weight vectors.

Weights for an ``MlpArchitecture`` are stored as one flat vector, layer by
layer, each layer as a row-major ``(fan_in, fan_out)`` matrix followed by its
bias. Hidden layers use ReLU; the last layer emits raw logits.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rng import SeededRng

CE_FLOOR = 1e-12


class GradientOverflow(FloatingPointError):
    pass


def _digest(arr: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(arr).view(np.uint8), digest_size=16).digest()


# --------------------------------------------------------------------------
# activations and losses


def softmax(logits) -> np.ndarray:
    """Row-wise softmax for a vector or a ``(batch, classes)`` matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(target, predicted) -> float:
    """``-sum target * log(predicted + 1e-12)`` for two probability vectors."""
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {p.shape}")
    for name, v in (("target", t), ("predicted", p)):
        if np.any(v < -1e-9) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} is not a probability vector")
    return float(-np.sum(t * np.log(p + CE_FLOOR)))


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("params, grads and Adam moments must have equal length")
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if not np.all(np.isfinite(grads)):
        raise GradientOverflow("gradient overflow")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, b1, b2, state.eps)


# --------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MlpArchitecture:
    widths: tuple[int, ...]

    def __post_init__(self):
        w = tuple(int(x) for x in self.widths)
        object.__setattr__(self, "widths", w)
        if len(w) < 2:
            raise ValueError("an architecture needs at least input and output widths")
        if any(x <= 0 for x in w):
            raise ValueError("layer widths must be positive")
        if w[-1] < 2:
            raise ValueError("class count must be at least 2")

    @property
    def n_inputs(self) -> int:
        return self.widths[0]

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.widths[:-1], self.widths[1:]))

    @property
    def n_weights(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def unpack(self, weights: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into the flat vector, one pair per layer."""
        if weights.ndim != 1 or weights.shape[0] != self.n_weights:
            raise ValueError(
                f"weight vector has length {weights.shape}, architecture {self.widths} "
                f"needs {self.n_weights}"
            )
        out, pos = [], 0
        for i, o in self.layer_shapes:
            W = weights[pos:pos + i * o].reshape(i, o)
            pos += i * o
            b = weights[pos:pos + o]
            pos += o
            out.append((W, b))
        return out

    def fan_in_vector(self) -> np.ndarray:
        """Per-weight fan-in of the owning layer, aligned with the flat layout."""
        parts = [np.full(i * o + o, float(i)) for i, o in self.layer_shapes]
        return np.concatenate(parts)

    def init_weights(self, rng: SeededRng) -> np.ndarray:
        return rng.normal(self.n_weights) / np.sqrt(self.fan_in_vector())


@dataclass
class ForwardCache:
    arch: MlpArchitecture
    inputs: list[np.ndarray]  # activation entering each layer
    pre: list[np.ndarray]  # pre-activations of each layer
    weights_digest: bytes = field(repr=False)


def mlp_forward(arch: MlpArchitecture, weights: np.ndarray, x: np.ndarray):
    """Returns ``(logits, cache)`` for a ``(batch, n_inputs)`` input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.n_inputs:
        raise ValueError(f"input shape {x.shape} does not match input width {arch.n_inputs}")
    layers = arch.unpack(weights)
    inputs, pre = [], []
    a = x
    for k, (W, b) in enumerate(layers):
        inputs.append(a)
        z = a @ W + b
        pre.append(z)
        a = np.maximum(z, 0.0) if k < len(layers) - 1 else z
    return a, ForwardCache(arch, inputs, pre, _digest(weights))


def mlp_backward(arch: MlpArchitecture, weights: np.ndarray, cache: ForwardCache,
                 grad_logits: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat weights, given dloss/dlogits."""
    if cache.arch != arch or cache.weights_digest != _digest(weights):
        raise ValueError("stale forward cache: weights or architecture changed since forward")
    layers = arch.unpack(weights)
    grad = np.empty(arch.n_weights)
    gl = arch.unpack(grad)
    d = np.asarray(grad_logits, dtype=np.float64)
    if d.shape != cache.pre[-1].shape:
        raise ValueError("upstream gradient shape does not match logits")
    for k in range(len(layers) - 1, -1, -1):
        gW, gb = gl[k]
        gW[...] = cache.inputs[k].T @ d
        gb[...] = d.sum(axis=0)
        if k > 0:
            d = (d @ layers[k][0].T) * (cache.pre[k - 1] > 0.0)
    return grad


def mean_ce_grad(logits: np.ndarray, targets: np.ndarray):
    """Mean soft-target cross-entropy over rows and its gradient at the logits."""
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = float(-np.sum(targets * logp) / n)
    grad = (np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets) / n
    return loss, grad


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: int
    checked: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}: max rel err {self.max_rel_error:.3e} at coordinate "
                f"{self.worst_index} ({len(self.checked)} checked)")


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]], params: np.ndarray,
               tol: float = 1e-4, h: float = 1e-5, max_coords: int | None = None,
               rng: SeededRng | None = None, floor: float = 1e-6) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradient with central differences.

    ``loss_fn(p)`` must return ``(loss, grad)``. With ``max_coords`` set and
    smaller than the parameter count, a random subset is checked instead
    (at least 50 coordinates). The relative error divides by
    ``max(|analytic|, |numeric|, floor)`` so that near-zero coordinates are
    judged on absolute error; differencing noise then dominates below ``floor``.
    """
    p = np.array(params, dtype=np.float64)
    _, analytic = loss_fn(p.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    n = p.shape[0]
    if max_coords is not None and max_coords < n:
        k = max(50, max_coords)
        idx = np.sort((rng or SeededRng(0)).choice(n, size=min(k, n), replace=False))
    else:
        idx = np.arange(n)
    numeric = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = p[i]
        p[i] = old + h
        fp = loss_fn(p)[0]
        p[i] = old - h
        fm = loss_fn(p)[0]
        p[i] = old
        numeric[j] = (fp - fm) / (2.0 * h)
    rel = relative_error(analytic[idx], numeric, floor)
    worst = int(np.argmax(rel))
    return GradCheckReport(
        passed=bool(rel[worst] < tol),
        max_rel_error=float(rel[worst]),
        worst_index=int(idx[worst]),
        checked=idx,
        analytic=analytic[idx],
        numeric=numeric,
    )


def batches(n: int, batch_size: int, rng: SeededRng) -> list[np.ndarray]:
    """Shuffled minibatch index arrays covering ``range(n)`` once."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_deterministic(arch: MlpArchitecture, weights: np.ndarray, x: np.ndarray,
                        labels: np.ndarray, epochs: int, lr: float, batch_size: int,
                        rng: SeededRng, state: AdamState | None = None,
                        epoch_offset: int = 0) -> tuple[np.ndarray, AdamState, list[float]]:
    """Plain cross-entropy training of a point-estimate MLP with Adam.

    Minibatch order for epoch ``e`` comes from ``rng.stream("epoch", epoch_offset + e)``
    so that a run split into chunks reproduces an unsplit one exactly.
    """
    w = np.array(weights, dtype=np.float64)
    state = state or AdamState.zeros(w.shape[0])
    y = one_hot(labels, arch.n_classes)
    trace = []
    for e in range(epochs):
        losses = []
        for idx in batches(x.shape[0], batch_size, rng.stream("epoch", epoch_offset + e)):
            logits, cache = mlp_forward(arch, w, x[idx])
            loss, g = mean_ce_grad(logits, y[idx])
            w, state = adam_step(w, mlp_backward(arch, w, cache, g), state, lr)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    return w, state, trace


def predict_proba(arch: MlpArchitecture, weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    return softmax(mlp_forward(arch, weights, x)[0])


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
    return arr
