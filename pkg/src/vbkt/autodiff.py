"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The op surface is deliberately small: matrix product, (bias) addition,
ReLU, softmax, log, square, axis reductions, an elementwise Huber distance,
and reparameterized Gaussian sampling.  Everything the training objectives
need is composed from these plus same-shape add/sub/mul glue.  All
arithmetic is 64-bit; any op that produces NaN/Inf raises immediately.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

_UINT64_MASK = (1 << 64) - 1
_KEY_SALT = 0x9E3779B97F4A7C15


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf values."""


class TapeConsumedError(RuntimeError):
    """backward() was called a second time over the same recorded graph."""


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape():
    """Return the innermost active Tape for this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops plus the stochastic-draw key.

    Gaussian draws made under an active tape are keyed by
    (seed, step, draw-index) on a counter-based generator, so the noise a
    node sees never depends on how the rest of the graph was evaluated.
    A tape and the tensors recorded on it belong to a single thread.
    """

    def __init__(self, seed: int = 0, step: int = 0):
        self.seed = int(seed)
        self.step = int(step)
        self.nodes: list[_Node] = []
        self._draws = 0

    def next_draw_key(self) -> tuple[int, int, int]:
        key = (self.seed, self.step, self._draws)
        self._draws += 1
        return key

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False


def counter_rng(seed: int, step: int = 0, stream: int = 0) -> np.random.Generator:
    """Deterministic Generator keyed by (seed, step, stream) on Philox.

    Distinct (step, stream) pairs occupy disjoint counter blocks, so draws
    from one key never overlap another regardless of how many values each
    consumes.
    """
    key = np.array([int(seed) & _UINT64_MASK, _KEY_SALT], dtype=np.uint64)
    counter = np.array(
        [0, int(stream) & _UINT64_MASK, int(step) & _UINT64_MASK, 0],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def _standard_normal(shape, key: tuple[int, int, int]) -> np.ndarray:
    seed, step, draw = key
    return counter_rng(seed, step=step, stream=draw).standard_normal(shape)


class _Node:
    __slots__ = ("inputs", "backward_fn", "consumed")

    def __init__(self, inputs, backward_fn):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """Dense float64 array, optionally tracking gradients.

    Values are immutable once constructed; only `grad` is populated during
    backward.  Repeated backward passes over *different* graphs accumulate
    into `grad`; callers that want fresh gradients reset it to None first.
    """

    __slots__ = ("values", "requires_grad", "grad", "_node")

    def __init__(self, values, requires_grad: bool = False):
        v = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("tensor values must be finite")
        self.values = v
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"

    # Operator sugar; scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / float(other))
        raise TypeError("tensor division is only supported by a scalar")

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Wrap an op result, recording a node iff some input tracks gradients."""
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out._node = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad:
        node = _Node(inputs, backward_fn)
        out._node = node
        tape = active_tape()
        if tape is not None:
            tape.nodes.append(node)
    return out


def _reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.sum(g)
    # Bias case: (batch, m) gradient against an (m,) operand.
    extra = g.ndim - len(shape)
    return np.sum(g, axis=tuple(range(extra)))


def _binary_shapes_ok(a: np.ndarray, b: np.ndarray) -> bool:
    """Same shape, scalar against anything, or a trailing-dim bias vector."""
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return True
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return True
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return True
    return False


def add(a, b) -> Tensor:
    """Elementwise sum; broadcasting is limited to scalar and bias-vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    if not _binary_shapes_ok(a.values, b.values):
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = a.values + b.values

    def backward_fn(g):
        return (_reduce_to_shape(g, a.values.shape),
                _reduce_to_shape(g, b.values.shape))

    return _make(out, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _binary_shapes_ok(a.values, b.values):
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = a.values - b.values

    def backward_fn(g):
        return (_reduce_to_shape(g, a.values.shape),
                _reduce_to_shape(-g, b.values.shape))

    return _make(out, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    """Elementwise product: scalar * tensor or same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if not (a.values.shape == b.values.shape
            or a.values.shape == () or b.values.shape == ()):
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    out = av * bv

    def backward_fn(g):
        return (_reduce_to_shape(g * bv, av.shape),
                _reduce_to_shape(g * av, bv.shape))

    return _make(out, (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("matmul requires rank-2 operands")
    if a.values.shape[1] != b.values.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    out = av @ bv

    def backward_fn(g):
        return (g @ bv.T, av.T @ g)

    return _make(out, (a, b), backward_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    xv = x.values
    out = np.maximum(xv, 0.0)

    def backward_fn(g):
        return (g * (xv > 0.0),)

    return _make(out, (x,), backward_fn)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.values <= 0.0):
        raise ValueError("log requires strictly positive values")
    xv = x.values
    out = np.log(xv)

    def backward_fn(g):
        return (g / xv,)

    return _make(out, (x,), backward_fn)


def square(x) -> Tensor:
    x = _as_tensor(x)
    xv = x.values
    out = xv * xv

    def backward_fn(g):
        return (2.0 * xv * g,)

    return _make(out, (x,), backward_fn)


def tsum(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    xv = x.values
    out = np.sum(xv, axis=axis)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        ge = np.expand_dims(g, axis)
        return (np.broadcast_to(ge, xv.shape).copy(),)

    return _make(np.asarray(out), (x,), backward_fn)


def tmean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    xv = x.values
    n = xv.size if axis is None else xv.shape[axis]
    out = np.mean(xv, axis=axis)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g / n, xv.shape).copy(),)
        ge = np.expand_dims(g / n, axis)
        return (np.broadcast_to(ge, xv.shape).copy(),)

    return _make(np.asarray(out), (x,), backward_fn)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`."""
    x = _as_tensor(x)
    xv = x.values
    shifted = xv - np.max(xv, axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (x,), backward_fn)


def huber(a, b) -> Tensor:
    """Elementwise smoothed-L1 distance between same-shape tensors.

    0.5*(a-b)^2 where |a-b| <= 1, |a-b| - 0.5 otherwise; both branches
    agree in value and slope at |a-b| = 1.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.shape != b.values.shape:
        raise ValueError(f"huber: shape mismatch {a.shape} vs {b.shape}")
    d = a.values - b.values
    small = np.abs(d) <= 1.0
    out = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
    slope = np.where(small, d, np.sign(d))

    def backward_fn(g):
        return (g * slope, -g * slope)

    return _make(out, (a, b), backward_fn)


def sample_gaussian(mu, sigma, seed: int | None = None,
                    step: int = 0, node: int = 0) -> Tensor:
    """Draw z = mu + sigma * eps with eps standard normal (reparameterized).

    Gradients flow to mu, and to sigma when it is a gradient-tracking
    tensor.  `sigma` is a standard deviation: a nonnegative scalar, an
    array broadcastable against mu, or a Tensor of the same shape (or a
    per-dimension vector).  Noise is keyed by (seed, step, node); with no
    explicit seed the key comes from the active tape.
    """
    mu = _as_tensor(mu)
    if seed is None:
        tape = active_tape()
        if tape is None:
            raise ValueError(
                "sample_gaussian needs an explicit seed or an active Tape")
        key = tape.next_draw_key()
    else:
        key = (int(seed), int(step), int(node))

    sigma_t = sigma if isinstance(sigma, Tensor) else None
    sv = sigma_t.values if sigma_t is not None else np.asarray(sigma, dtype=np.float64)
    if np.any(sv < 0.0):
        raise ValueError("sample_gaussian requires nonnegative sigma")
    if sv.shape not in ((), mu.values.shape) and not (
            sv.ndim == 1 and mu.values.ndim == 2 and sv.shape[0] == mu.values.shape[1]):
        raise ValueError(
            f"sample_gaussian: sigma shape {sv.shape} incompatible with mu {mu.shape}")

    eps = _standard_normal(mu.values.shape, key)
    out = mu.values + sv * eps

    if sigma_t is not None:
        def backward_fn(g):
            return (g, _reduce_to_shape(g * eps, sv.shape))
        return _make(out, (mu, sigma_t), backward_fn)

    def backward_fn(g):
        return (g,)

    return _make(out, (mu,), backward_fn)


_OPS = {
    "matmul": matmul,
    "add_bias": add,
    "relu": relu,
    "softmax": softmax,
    "log": log,
    "square": square,
    "sum": tsum,
    "mean": tmean,
    "huber": huber,
    "sample_gaussian": sample_gaussian,
}


def forward_op(op_kind: str, inputs, **params) -> Tensor:
    """Dispatch one named op over `inputs` (a Tensor or sequence of Tensors)."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op_kind {op_kind!r}") from None
    if isinstance(inputs, Tensor):
        inputs = (inputs,)
    return fn(*inputs, **params)


def backward(output: Tensor) -> None:
    """Populate grads of every gradient-tracking leaf reachable from `output`.

    Traverses the recorded graph in reverse topological order, visiting
    each node exactly once.  Leaf grads accumulate across calls on
    *different* graphs (callers reset between steps); running backward a
    second time over the same graph raises TapeConsumedError.
    """
    if not isinstance(output, Tensor):
        raise TypeError("backward expects a Tensor")
    if output.values.shape != ():
        raise ValueError("backward requires a scalar output")
    if output._node is None:
        if output.requires_grad:
            seed_grad = np.ones((), dtype=np.float64)
            output.grad = seed_grad if output.grad is None else output.grad + seed_grad
        return

    # Iterative post-order DFS: parents appear before their consumers.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))

    grads: dict[int, np.ndarray] = {id(output): np.ones((), dtype=np.float64)}
    leaves: list[Tensor] = []
    for t in reversed(topo):
        node = t._node
        if node.consumed:
            raise TapeConsumedError("tape already consumed by a prior backward")
        node.consumed = True
        g = grads.pop(id(t), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = np.asarray(ig, dtype=np.float64)
            if inp._node is None:
                if inp.grad is None:
                    inp.grad = ig.copy()
                    leaves.append(inp)
                else:
                    inp.grad = inp.grad + ig
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig

    for leaf in leaves:
        if not np.all(np.isfinite(leaf.grad)):
            raise NonFiniteError("backward produced non-finite gradients")


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_error: float
    passed: bool


def grad_check(f, point, fd_step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar f against central differences.

    f must be deterministic given its input: any sampling inside it has to
    use fixed explicit keys, so that perturbed evaluations see identical
    noise.  Relative error uses denominator max(|a|, |b|, 1e-8).
    """
    if fd_step <= 0.0:
        raise ValueError("fd_step must be positive")
    base = np.asarray(point.values if isinstance(point, Tensor) else point,
                      dtype=np.float64)

    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if not isinstance(out, Tensor) or out.values.shape != ():
        raise ValueError("grad_check requires f to return a scalar Tensor")
    backward(out)
    analytic = np.zeros_like(base) if x.grad is None else np.asarray(x.grad)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + fd_step
        hi = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[i] = flat[i] - fd_step
        lo = f(Tensor(bumped.reshape(base.shape))).item()
        num_flat[i] = (hi - lo) / (2.0 * fd_step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel_error=max_rel, passed=bool(max_rel <= tol))
