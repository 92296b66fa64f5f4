"""Small dense reverse-mode autodiff on float64 numpy arrays.

Every differentiable op appends a record to the thread's active :class:`Tape`.
Records are created in execution order, so the tape is already topologically
sorted and :func:`backward` just walks it in reverse. Parameters are leaves
that accumulate into ``.grad``; the tape is cleared after each backward.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NotADistribution, NotScalar, ShapeMismatch

DIST_TOL = 1e-6


class _Record:
    __slots__ = ("op", "inputs", "out", "backward_fn", "tape", "gen")

    def __init__(self, op, inputs, out, backward_fn, tape, gen):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn
        self.tape = tape
        self.gen = gen


class Tape:
    """Operation log for one training context; confined to one thread."""

    def __init__(self):
        self.records: list[_Record] = []
        self.gen = 0
        self.enabled = True

    def __len__(self):
        return len(self.records)

    def is_live(self, rec: Optional[_Record]) -> bool:
        return rec is not None and rec.tape is self and rec.gen == self.gen

    def clear(self) -> None:
        self.records = []
        self.gen += 1


_local = threading.local()


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = active_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, values, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.name = name
        self._rec: Optional[_Record] = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    @property
    def tracked(self) -> bool:
        return active_tape().is_live(self._rec)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __matmul__ = lambda a, b: matmul(a, b)
    __neg__ = lambda a: mul(a, -1.0)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Parameter(Tensor):
    """Trainable leaf: value, accumulated gradient and AdamW moments."""

    def __init__(self, values, name: str | None = None):
        super().__init__(np.array(values, dtype=np.float64), name)
        self.grad = np.zeros_like(self.values)
        self.m = np.zeros_like(self.values)
        self.v = np.zeros_like(self.values)

    @property
    def tracked(self) -> bool:
        return True

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_tracked(t: Tensor) -> bool:
    return isinstance(t, Parameter) or active_tape().is_live(t._rec)


def _make(op: str, values, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(values)
    tape = active_tape()
    if tape.enabled and any(_is_tracked(t) for t in inputs):
        rec = _Record(op, tuple(inputs), out, backward_fn, tape, tape.gen)
        tape.records.append(rec)
        out._rec = rec
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


# --- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("sub", a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", a.values * b.values, (a, b),
                 lambda g: (_unbroadcast(g * b.values, a.shape),
                            _unbroadcast(g * a.values, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values / b.values
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.values, a.shape),
                            _unbroadcast(-g * out / b.values, b.shape)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make("log", np.log(a.values), (a,), lambda g: (g / a.values,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    return _make("relu", np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.values))  # overflow-free logistic
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


# --- shape / reduction ----------------------------------------------------

def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make("transpose", a.values.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx)

    def bw(g):
        full = np.zeros_like(a.values)
        np.add.at(full, idx, g)
        return (full,)

    return _make("take_rows", a.values[idx], (a,), bw)


def concat_rows(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    cuts = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _make("concat_rows", np.concatenate([p.values for p in parts], axis=0), parts,
                 lambda g: tuple(np.split(g, cuts, axis=0)))


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make("sum", a.values.sum(axis=axis), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


# --- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return _make("matmul", a.values @ b.values, (a, b),
                 lambda g: (g @ b.values.T, a.values.T @ g))


def linear(x, W, b) -> Tensor:
    """``x @ W + b`` for x (n, d), W (d, m), b (m,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.values.ndim != 2 or W.values.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeMismatch(f"linear x{x.shape} W{W.shape} b{b.shape}")
    return _make("linear", x.values @ W.values + b.values, (x, W, b),
                 lambda g: (g @ W.values.T, x.values.T @ g, g.sum(axis=0)))


def normalize_rows(a, eps: float = 1e-12) -> Tensor:
    """Scale every row to unit L2 norm (rows with norm < eps are left tiny)."""
    a = as_tensor(a)
    norm = np.sqrt((a.values ** 2).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = a.values / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norm,)

    return _make("normalize_rows", out, (a,), bw)


# --- distributions --------------------------------------------------------

def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return _make("softmax_rows", out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=1, keepdims=True)),))


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.values - a.values.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    sm = np.exp(out)
    return _make("log_softmax_rows", out, (a,),
                 lambda g: (g - sm * g.sum(axis=1, keepdims=True),))


def _check_distribution(p: np.ndarray) -> None:
    if p.ndim != 2:
        raise ShapeMismatch(f"expected rows of distributions, got shape {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > DIST_TOL):
        raise NotADistribution("rows must be non-negative and sum to 1")


def _xlogx_parts(p: np.ndarray):
    pos = p > 0
    logp = np.where(pos, np.log(np.where(pos, p, 1.0)), 0.0)
    return pos, logp


def kl_rows(p, log_q) -> Tensor:
    """Row-mean of ``sum_j p_j (ln p_j - log_q_j)`` with ``0 ln 0 = 0``."""
    p, log_q = as_tensor(p), as_tensor(log_q)
    if p.shape != log_q.shape:
        raise ShapeMismatch(f"kl_rows {p.shape} vs {log_q.shape}")
    _check_distribution(p.values)
    n = p.shape[0]
    pos, logp = _xlogx_parts(p.values)
    val = (p.values * (logp - log_q.values)).sum() / n

    def bw(g):
        gp = np.where(pos, logp + 1.0 - log_q.values, -log_q.values) * (g / n)
        return gp, -p.values * (g / n)

    return _make("kl_rows", np.asarray(val), (p, log_q), bw)


def entropy_rows(p) -> Tensor:
    """Row-mean Shannon entropy (nats)."""
    p = as_tensor(p)
    _check_distribution(p.values)
    n = p.shape[0]
    pos, logp = _xlogx_parts(p.values)
    val = -(p.values * logp).sum() / n
    return _make("entropy_rows", np.asarray(val), (p,),
                 lambda g: (-np.where(pos, logp + 1.0, 0.0) * (g / n),))


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse {a.shape} vs {b.shape}")
    diff = a.values - b.values
    n = diff.size
    return _make("mse", np.asarray((diff ** 2).sum() / n), (a, b),
                 lambda g: (2.0 * diff * g / n, -2.0 * diff * g / n))


def cross_entropy(logits, labels) -> Tensor:
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    lsm = log_softmax_rows(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return mul(tsum(mul(lsm, onehot)), -1.0 / len(labels))


# --- backward -------------------------------------------------------------

def backward(loss: Tensor, mask: Optional[Iterable[Parameter]] = None,
             retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for reachable parameters.

    ``mask`` restricts accumulation to the given parameters. The tape is
    cleared afterwards unless ``retain_graph``.
    """
    loss = as_tensor(loss)
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    allowed = None if mask is None else {id(p) for p in mask}
    tape = active_tape()

    def deposit(t: Tensor, g: np.ndarray, grads: dict):
        if isinstance(t, Parameter):
            if allowed is None or id(t) in allowed:
                t.grad += g
        elif tape.is_live(t._rec):
            key = id(t)
            grads[key] = grads[key] + g if key in grads else g

    grads: dict[int, np.ndarray] = {}
    deposit(loss, np.ones(loss.shape), grads)
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward_fn(g)):
            if gi is not None:
                deposit(inp, np.asarray(gi, dtype=np.float64), grads)
    if not retain_graph:
        tape.clear()


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-4,
               coords_per_param: int = 5, rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients with central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. Returns
    the max over sampled coordinates of ``|g - g_fd| / max(1e-8, |g| + |g_fd|)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    active_tape().clear()
    zero_grad(params)
    backward(f())
    worst = 0.0
    for prm in params:
        flat = prm.values.reshape(-1)
        n = min(coords_per_param, flat.size)
        for i in rng.choice(flat.size, size=n, replace=False):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            g = prm.grad.reshape(-1)[i]
            worst = max(worst, abs(g - fd) / max(1e-8, abs(g) + abs(fd)))
    zero_grad(params)
    return worst
