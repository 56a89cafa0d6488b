"""Dense float64 matrices with tape-based reverse-mode autodiff.

Everything the trainable layers run on lives here: the Matrix type, the
differentiable kernels, gradient checking, AdamW with decoupled weight
decay, global-norm clipping and the linear decay schedule. All shapes are
explicit 2-D; a row vector is a 1 x n matrix. Values are immutable after
construction except through the optimizer; gradients are plain numpy
buffers owned by the active tape.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class MissingGrad(KeyError):
    pass


class OutOfRange(ValueError):
    pass


class Matrix:
    """A rows x cols array of finite 64-bit floats, optionally trainable."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2 or arr.size == 0:
            raise ShapeMismatch(f"matrix must be non-empty 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("matrix entries must be finite (no NaN/Inf)")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Matrix":
        # Internal fast path: arr is a fresh float64 2-D array we own.
        out = cls.__new__(cls)
        if not np.isfinite(arr).all():
            raise ValueError("matrix entries must be finite (no NaN/Inf)")
        out.values = arr
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @classmethod
    def zeros(cls, rows: int, cols: int, requires_grad: bool = False) -> "Matrix":
        return cls._wrap(np.zeros((rows, cols)), requires_grad)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise NotScalar(f"item() on shape {self.shape}")
        return float(self.values[0, 0])

    def tolist(self) -> list[list[float]]:
        return self.values.tolist()

    def copy(self) -> "Matrix":
        return Matrix._wrap(self.values.copy(), self.requires_grad)

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols}, requires_grad={self.requires_grad})"


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

# Each entry: (inputs, output, backward) where backward maps the output
# gradient to one gradient (or None) per input.
_TapeEntry = tuple[tuple[Matrix, ...], Matrix, Callable[[np.ndarray], tuple]]
_TAPE: list[_TapeEntry] = []
_RECORDING = True


@contextmanager
def no_grad():
    """Disable tape recording; forward passes inside run grad-free."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


def tape_size() -> int:
    return len(_TAPE)


def reset_tape() -> None:
    _TAPE.clear()


def _record(inputs: tuple[Matrix, ...], out: Matrix, backward) -> None:
    if _RECORDING and out.requires_grad:
        _TAPE.append((inputs, out, backward))


def backward(loss: Matrix) -> None:
    """Accumulate gradients of `loss` into every reachable trainable matrix.

    The loss must be 1x1. The tape is consumed and reset afterwards, so a
    new forward pass is needed before the next call.
    """
    if loss.rows != 1 or loss.cols != 1:
        raise NotScalar(f"loss must be 1x1, got {loss.shape}")
    try:
        if not loss.requires_grad:
            return
        loss.grad = np.ones((1, 1))
        for inputs, out, bwd in reversed(_TAPE):
            g = out.grad
            if g is None:
                continue
            for m, gi in zip(inputs, bwd(g)):
                if gi is not None and m.requires_grad:
                    m.grad = gi if m.grad is None else m.grad + gi
    finally:
        _TAPE.clear()


# ---------------------------------------------------------------------------
# Differentiable kernels
# ---------------------------------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = Matrix._wrap(a.values @ b.values, a.requires_grad or b.requires_grad)

    def bwd(g):
        return (
            g @ b.values.T if a.requires_grad else None,
            a.values.T @ g if b.requires_grad else None,
        )

    _record((a, b), out, bwd)
    return out


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add {a.shape} + {b.shape}")
    out = Matrix._wrap(a.values + b.values, a.requires_grad or b.requires_grad)
    _record((a, b), out, lambda g: (g, g))
    return out


def sub(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub {a.shape} - {b.shape}")
    out = Matrix._wrap(a.values - b.values, a.requires_grad or b.requires_grad)
    _record((a, b), out, lambda g: (g, -g))
    return out


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeMismatch(f"hadamard {a.shape} * {b.shape}")
    out = Matrix._wrap(a.values * b.values, a.requires_grad or b.requires_grad)
    _record((a, b), out, lambda g: (g * b.values, g * a.values))
    return out


def scale(a: Matrix, factor: float) -> Matrix:
    factor = float(factor)
    out = Matrix._wrap(a.values * factor, a.requires_grad)
    _record((a,), out, lambda g: (g * factor,))
    return out


def leaky_relu(a: Matrix, slope: float = 0.2) -> Matrix:
    mask = np.where(a.values >= 0.0, 1.0, float(slope))
    out = Matrix._wrap(a.values * mask, a.requires_grad)
    _record((a,), out, lambda g: (g * mask,))
    return out


def elementwise(kind: str, a: Matrix, b: Matrix | float | None = None, slope: float = 0.2) -> Matrix:
    """Dispatch by name; the named functions above are the primary API."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "hadamard":
        return hadamard(a, b)
    if kind == "scale":
        return scale(a, b)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def transpose(a: Matrix) -> Matrix:
    out = Matrix._wrap(a.values.T.copy(), a.requires_grad)
    _record((a,), out, lambda g: (g.T,))
    return out


def softmax_rows(a: Matrix) -> Matrix:
    """Row-wise softmax with max-subtraction for stability."""
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Matrix._wrap(y, a.requires_grad)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    _record((a,), out, bwd)
    return out


def rms_norm(x: Matrix, g: Matrix, eps: float = 1e-8) -> Matrix:
    """Scale each row of x to unit root-mean-square, then apply gain g.

    out[i, j] = x[i, j] / sqrt(mean(x[i, :]**2) + eps) * g[0, j]
    """
    if g.rows != 1 or g.cols != x.cols:
        raise ShapeMismatch(f"rms_norm gain {g.shape} for input {x.shape}")
    n = x.cols
    inv = 1.0 / np.sqrt((x.values * x.values).mean(axis=1, keepdims=True) + eps)
    out = Matrix._wrap(x.values * inv * g.values, x.requires_grad or g.requires_grad)

    def bwd(grad):
        gx = None
        gg = None
        if x.requires_grad:
            # d out_ij / d x_ik = inv_i g_j [j==k] - inv_i^3 x_ij g_j x_ik / n
            weighted = (grad * g.values * x.values).sum(axis=1, keepdims=True)
            gx = inv * grad * g.values - (inv ** 3 / n) * x.values * weighted
        if g.requires_grad:
            gg = (grad * x.values * inv).sum(axis=0, keepdims=True)
        return (gx, gg)

    _record((x, g), out, bwd)
    return out


def mean_pool_rows(h: Matrix) -> Matrix:
    """Element-wise average over rows, returned as a 1 x cols row vector."""
    if h.rows < 1:
        raise EmptyInput("mean_pool_rows over zero rows")
    out = Matrix._wrap(h.values.mean(axis=0, keepdims=True), h.requires_grad)
    n = h.rows
    _record((h,), out, lambda g: (np.repeat(g / n, n, axis=0),))
    return out


def sum_all(a: Matrix) -> Matrix:
    out = Matrix._wrap(np.array([[a.values.sum()]]), a.requires_grad)
    _record((a,), out, lambda g: (np.full(a.shape, g[0, 0]),))
    return out


def gather_rows(a: Matrix, indices: Sequence[int]) -> Matrix:
    """Select rows by index (repeats allowed); gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise EmptyInput("gather_rows needs at least one index")
    if idx.min() < 0 or idx.max() >= a.rows:
        raise ShapeMismatch(f"row index out of range for {a.shape}")
    out = Matrix._wrap(a.values[idx].copy(), a.requires_grad)

    def bwd(g):
        z = np.zeros_like(a.values)
        np.add.at(z, idx, g)
        return (z,)

    _record((a,), out, bwd)
    return out


def concat_rows(parts: Sequence[Matrix]) -> Matrix:
    if not parts:
        raise EmptyInput("concat_rows of nothing")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise ShapeMismatch("concat_rows with differing column counts")
    out = Matrix._wrap(
        np.concatenate([p.values for p in parts], axis=0),
        any(p.requires_grad for p in parts),
    )
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    _record(tuple(parts), out, bwd)
    return out


def add_rowvec(a: Matrix, v: Matrix) -> Matrix:
    """Add the 1 x cols row vector v to every row of a."""
    if v.rows != 1 or v.cols != a.cols:
        raise ShapeMismatch(f"add_rowvec {a.shape} + {v.shape}")
    out = Matrix._wrap(a.values + v.values, a.requires_grad or v.requires_grad)
    _record((a, v), out, lambda g: (g, g.sum(axis=0, keepdims=True)))
    return out


def mul_colvec(a: Matrix, c: Matrix) -> Matrix:
    """Scale row i of a by c[i, 0]."""
    if c.cols != 1 or c.rows != a.rows:
        raise ShapeMismatch(f"mul_colvec {a.shape} * {c.shape}")
    out = Matrix._wrap(a.values * c.values, a.requires_grad or c.requires_grad)
    _record((a, c), out, lambda g: (g * c.values, (g * a.values).sum(axis=1, keepdims=True)))
    return out


def cross_entropy_rows(logits: Matrix, target_ids: Sequence[int]) -> Matrix:
    """Mean token-level cross-entropy of each row against its target id."""
    ids = np.asarray(target_ids, dtype=np.intp)
    if ids.ndim != 1 or ids.size != logits.rows:
        raise ShapeMismatch("one target id per logit row required")
    if ids.min() < 0 or ids.max() >= logits.cols:
        raise ShapeMismatch("target id out of vocabulary range")
    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.values.max(axis=1)
    picked = logits.values[np.arange(ids.size), ids]
    n = ids.size
    out = Matrix._wrap(np.array([[float((lse - picked).mean())]]), logits.requires_grad)

    def bwd(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), ids] -= 1.0
        return (p * (g[0, 0] / n),)

    _record((logits,), out, bwd)
    return out


# ---------------------------------------------------------------------------
# Parameters and optimization
# ---------------------------------------------------------------------------


class ParamStore:
    """Ordered name -> Matrix map with a frozen subset excluded from updates."""

    def __init__(self):
        self._params: dict[str, Matrix] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, matrix: Matrix, frozen: bool = False) -> Matrix:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = matrix
        if frozen:
            self.frozen.add(name)
            matrix.requires_grad = False
        return matrix

    def freeze(self, name: str) -> None:
        self[name].requires_grad = False
        self.frozen.add(name)

    def __getitem__(self, name: str) -> Matrix:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Matrix]]:
        return self._params.items()

    def trainable_items(self) -> Iterable[tuple[str, Matrix]]:
        return ((n, p) for n, p in self._params.items() if n not in self.frozen)

    def trainable_size(self) -> int:
        return sum(p.size for _, p in self.trainable_items())


def zero_grads(store: ParamStore) -> None:
    for _, p in store.items():
        p.grad = None


@dataclass
class OptimState:
    """AdamW moments plus hyperparameters; lr is the unscheduled base rate."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(store: ParamStore, state: OptimState, lr: float | None = None) -> None:
    """One AdamW update with bias correction and decoupled weight decay.

    Frozen parameters are never touched, even if a stray gradient exists.
    Gradients of updated parameters are cleared.
    """
    if lr is None:
        lr = state.lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in store.trainable_items():
        if p.grad is None:
            raise MissingGrad(name)
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.values)
            v = np.zeros_like(p.values)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / bc1
        vhat = v / bc2
        p.values -= lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p.values)
        p.grad = None


def clip_global_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the scale that was applied (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise OutOfRange("max_norm must be positive")
    total = 0.0
    grads = []
    for name, p in store.trainable_items():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
            grads.append(p)
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for p in grads:
        p.grad = p.grad * factor
    return factor


def linear_lr_factor(step: int, total_steps: int) -> float:
    """Linear decay from 1 at step 0 to 0 at step == total_steps, no warmup."""
    if total_steps < 1:
        raise OutOfRange("total_steps must be >= 1")
    if step < 0 or step > total_steps:
        raise OutOfRange(f"step {step} outside [0, {total_steps}]")
    return 1.0 - step / total_steps


def grad_check(
    f: Callable[[ParamStore], Matrix],
    store: ParamStore,
    eps: float = 1e-5,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    f must be a deterministic map from the store to a 1x1 loss. Relative
    error uses max(1, |analytic|, |numeric|) in the denominator so that
    near-zero gradients are compared absolutely.
    """
    if eps <= 0:
        raise OutOfRange("eps must be positive")
    zero_grads(store)
    reset_tape()
    backward(f(store))
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
        for name, p in store.trainable_items()
    }
    zero_grads(store)
    worst = 0.0
    with no_grad():
        for name, p in store.trainable_items():
            flat = p.values.reshape(-1)
            ana = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = f(store).values[0, 0]
                flat[i] = orig - eps
                f_minus = f(store).values[0, 0]
                flat[i] = orig
                num = (f_plus - f_minus) / (2.0 * eps)
                rel = abs(num - ana[i]) / max(1.0, abs(num), abs(ana[i]))
                if rel > worst:
                    worst = rel
    return worst
