"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float64 by default, float32 for fast
training) and is treated as immutable after creation.  Operations record
themselves on the innermost active ``Tape`` whenever any input requires a
gradient; ``backward`` replays the tape in reverse to accumulate adjoints.

Shape discipline is deliberately narrow: everything is a scalar (shape
``()``), a 2-D matrix, or a 1-D vector passed to an elementwise op.  The only
broadcasts allowed are scalar-times-tensor (``scale``) and matrix plus a
``(1, m)`` row bias (``add``/``sub``).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

# exp() refuses inputs it cannot represent instead of returning inf
_EXP_LIMIT = {np.dtype(np.float64): 709.0, np.dtype(np.float32): 88.0}

COSINE_EPS = 1e-12
LEAKY_RELU_SLOPE = 0.01


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(TensorError):
    """Operand shapes are incompatible with the requested op."""

    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(TensorError):
    """Operand values are outside the op's numeric domain."""

    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class Tensor:
    """Immutable dense array participating in differentiation.

    ``requires_grad`` marks leaves (parameters); intermediate results get the
    flag set automatically while a tape is recording.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded op: inputs, output, and the local backward rule.

    ``backward(g)`` maps the output adjoint to a tuple of input adjoints
    aligned with ``inputs``; entries for inputs that do not need gradients
    are ``None``.
    """

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended in execution order, which is a topological order by
    construction.  A tape belongs to one logical thread; independent tapes
    may run concurrently on separate threads.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape context exited out of order")
        stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def _record(op: str, inputs: tuple, output: Tensor, backward: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        need = tuple(t.requires_grad for t in inputs)
        output.requires_grad = True
        tape.nodes.append(TapeNode(op, inputs, output, lambda g, _need=need: backward(g, _need)))
    return output


def backward(tape: Tape, loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict:
    """Reverse sweep over the tape, returning ``{leaf: grad Tensor}``.

    ``loss`` must be scalar.  Every node is visited exactly once.  When
    ``leaves`` is given, each listed tensor gets an entry (zeros if the loss
    does not reach it); otherwise leaves are inferred as recorded inputs with
    ``requires_grad`` that are not themselves produced on the tape.
    """
    if loss.size != 1:
        raise ShapeError("backward", [loss.shape], "loss must be scalar")

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.output) for node in tape.nodes}

    for node in reversed(tape.nodes):
        g_out = adjoint.get(id(node.output))
        if g_out is None:
            continue
        grads_in = node.backward(g_out)
        for tensor, g in zip(node.inputs, grads_in):
            if g is None:
                continue
            key = id(tensor)
            if key in adjoint:
                adjoint[key] = adjoint[key] + g
            else:
                adjoint[key] = g

    if leaves is None:
        seen: dict[int, Tensor] = {}
        for node in tape.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen[id(t)] = t
        leaves = list(seen.values())

    out: dict[Tensor, Tensor] = {}
    for leaf in leaves:
        g = adjoint.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        out[leaf] = Tensor(np.asarray(g, dtype=leaf.dtype))
    return out


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def _check_same_dtype(op: str, *tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(op, [t.shape for t in tensors], f"mixed dtypes {sorted(d.name for d in dtypes)}")


def _check_2d(op: str, *tensors: Tensor):
    for t in tensors:
        if t.ndim != 2:
            raise ShapeError(op, [x.shape for x in tensors], "expected 2-D operands")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape], "inner dimensions differ")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bwd(g, need):
        ga = g @ bd.T if need[0] else None
        gb = ad.T @ g if need[1] else None
        return ga, gb

    return _record("matmul", (a, b), out, bwd)


def _is_row_bias(a: Tensor, b: Tensor) -> bool:
    return a.ndim == 2 and b.ndim == 2 and b.shape[0] == 1 and b.shape[1] == a.shape[1] and a.shape[0] != 1


def _add_like(op: str, a: Tensor, b: Tensor, sign: float) -> Tensor:
    _check_same_dtype(op, a, b)
    if a.shape == b.shape:
        bias = False
    elif _is_row_bias(a, b):
        bias = True
    else:
        raise ShapeError(op, [a.shape, b.shape], "same shape or (n,m)+(1,m) row bias required")
    out = Tensor(a.data + sign * b.data)

    def bwd(g, need):
        ga = g if need[0] else None
        if not need[1]:
            gb = None
        elif bias:
            gb = sign * g.sum(axis=0, keepdims=True)
        else:
            gb = sign * g
        return ga, gb

    return _record(op, (a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _add_like("add", a, b, 1.0)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _add_like("sub", a, b, -1.0)


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul_elementwise", a, b)
    if a.shape != b.shape:
        raise ShapeError("mul_elementwise", [a.shape, b.shape], "shapes must match exactly")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def bwd(g, need):
        return (g * bd if need[0] else None), (g * ad if need[1] else None)

    return _record("mul_elementwise", (a, b), out, bwd)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor(a.data * a.dtype.type(factor))

    def bwd(g, need):
        return (g * factor if need[0] else None,)

    return _record("scale", (a,), out, bwd)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0  # subgradient at 0 is 0

    def bwd(g, need):
        return (g * mask if need[0] else None,)

    return _record("relu", (a,), out, bwd)


def leaky_relu(a: Tensor, slope: float = LEAKY_RELU_SLOPE) -> Tensor:
    out = Tensor(np.where(a.data > 0, a.data, a.dtype.type(slope) * a.data))
    grad_factor = np.where(a.data > 0, a.dtype.type(1.0), a.dtype.type(slope))

    def bwd(g, need):
        return (g * grad_factor if need[0] else None,)

    return _record("leaky_relu", (a,), out, bwd)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    flat = np.atleast_1d(np.asarray(x))
    out = np.empty_like(flat)
    pos = flat >= 0
    neg = ~pos
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[neg])
    out[neg] = ex / (1.0 + ex)
    return out.reshape(np.shape(x))


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    out = Tensor(s)

    def bwd(g, need):
        return (g * s * (1.0 - s) if need[0] else None,)

    return _record("sigmoid", (a,), out, bwd)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t)

    def bwd(g, need):
        return (g * (1.0 - t * t) if need[0] else None,)

    return _record("tanh", (a,), out, bwd)


def exp(a: Tensor) -> Tensor:
    limit = _EXP_LIMIT[a.dtype]
    if a.size and float(a.data.max()) > limit:
        raise DomainError("exp", f"input {float(a.data.max()):.6g} exceeds representable limit {limit}")
    e = np.exp(a.data)
    out = Tensor(e)

    def bwd(g, need):
        return (g * e if need[0] else None,)

    return _record("exp", (a,), out, bwd)


def log(a: Tensor) -> Tensor:
    if a.size and float(a.data.min()) <= 0.0:
        raise DomainError("log", f"input {float(a.data.min()):.6g} is not positive")
    out = Tensor(np.log(a.data))
    ad = a.data

    def bwd(g, need):
        return (g / ad if need[0] else None,)

    return _record("log", (a,), out, bwd)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(dtype=a.dtype), dtype=a.dtype))
    shape = a.shape

    def bwd(g, need):
        return (np.broadcast_to(g, shape).copy() if need[0] else None,)

    return _record("sum", (a,), out, bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    if n == 0:
        raise ShapeError("mean", [a.shape], "mean of empty tensor")
    out = Tensor(np.asarray(a.data.sum(dtype=a.dtype) / n, dtype=a.dtype))
    shape = a.shape

    def bwd(g, need):
        return (np.broadcast_to(g / n, shape).copy() if need[0] else None,)

    return _record("mean", (a,), out, bwd)


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a: Tensor) -> Tensor:
    _check_2d("softmax_rows", a)
    s = _softmax(a.data)
    out = Tensor(s)

    def bwd(g, need):
        if not need[0]:
            return (None,)
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record("softmax_rows", (a,), out, bwd)


def logsumexp_rows(a: Tensor) -> Tensor:
    """Row-wise log(sum(exp(x))), shape (n, m) -> (n, 1), overflow-safe."""
    _check_2d("logsumexp_rows", a)
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    denom = e.sum(axis=1, keepdims=True)
    out = Tensor(m + np.log(denom))
    soft = e / denom

    def bwd(g, need):
        return (soft * g if need[0] else None,)

    return _record("logsumexp_rows", (a,), out, bwd)


def concat_rows(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise ShapeError("concat_rows", [], "needs at least one input")
    _check_same_dtype("concat_rows", *tensors)
    _check_2d("concat_rows", *tensors)
    cols = {t.shape[1] for t in tensors}
    if len(cols) > 1:
        raise ShapeError("concat_rows", [t.shape for t in tensors], "column counts differ")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))
    row_counts = [t.shape[0] for t in tensors]

    def bwd(g, need):
        grads = []
        offset = 0
        for n, needed in zip(row_counts, need):
            grads.append(g[offset:offset + n] if needed else None)
            offset += n
        return tuple(grads)

    return _record("concat_rows", tuple(tensors), out, bwd)


def transpose(a: Tensor) -> Tensor:
    _check_2d("transpose", a)
    out = Tensor(a.data.T.copy())

    def bwd(g, need):
        return (g.T if need[0] else None,)

    return _record("transpose", (a,), out, bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _check_2d("slice_rows", a)
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError("slice_rows", [a.shape], f"bad row range [{start}, {stop})")
    out = Tensor(a.data[start:stop].copy())
    shape = a.shape

    def bwd(g, need):
        if not need[0]:
            return (None,)
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _record("slice_rows", (a,), out, bwd)


def clip(a: Tensor, lo: float | None, hi: float | None) -> Tensor:
    lo_v = -np.inf if lo is None else float(lo)
    hi_v = np.inf if hi is None else float(hi)
    out = Tensor(np.clip(a.data, lo_v, hi_v))
    mask = (a.data > lo_v) & (a.data < hi_v)  # saturated entries get zero grad

    def bwd(g, need):
        return (g * mask if need[0] else None,)

    return _record("clip", (a,), out, bwd)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Scalar cosine similarity of two same-shape tensors (flattened).

    The denominator is clamped at ``COSINE_EPS`` so zero vectors yield 0
    instead of dividing by zero; the clamp branch treats the denominator as a
    constant for the gradient.
    """
    _check_same_dtype("cosine_similarity", u, v)
    if u.shape != v.shape:
        raise ShapeError("cosine_similarity", [u.shape, v.shape], "shapes must match")
    uf = u.data.ravel()
    vf = v.data.ravel()
    dot = float(uf @ vf)
    nu = float(np.sqrt(uf @ uf))
    nv = float(np.sqrt(vf @ vf))
    clamped = nu * nv < COSINE_EPS
    denom = max(COSINE_EPS, nu * nv)
    c = dot / denom
    out = Tensor(np.asarray(c, dtype=u.dtype))
    u_shape, v_shape = u.shape, v.shape

    def bwd(g, need):
        gs = float(g)
        if clamped:
            gu = gs * vf / denom
            gv = gs * uf / denom
        else:
            gu = gs * (vf / denom - c * uf / (nu * nu))
            gv = gs * (uf / denom - c * vf / (nv * nv))
        return (
            gu.reshape(u_shape).astype(uf.dtype) if need[0] else None,
            gv.reshape(v_shape).astype(vf.dtype) if need[1] else None,
        )

    return _record("cosine_similarity", (u, v), out, bwd)


# Dispatch table for the generic entry point and for test harnesses that
# sweep every op kind.
OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elementwise": mul_elementwise,
    "scale": scale,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sum": sum_all,
    "mean": mean_all,
    "softmax_rows": softmax_rows,
    "logsumexp_rows": logsumexp_rows,
    "concat_rows": concat_rows,
    "transpose": transpose,
    "slice_rows": slice_rows,
    "clip": clip,
    "cosine_similarity": cosine_similarity,
}


def forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply an op by name; unknown names raise ``KeyError``."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise KeyError(f"unknown op_kind {op_kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def _eval_scalar(f: Callable[[Tensor], Tensor], x: np.ndarray) -> float:
    y = f(Tensor(x))
    if y.size != 1:
        raise ShapeError("grad_check", [y.shape], "f must return a scalar")
    return float(y.data)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max over coordinates of |a - n| / max(1, |a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, step: float) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    base = np.asarray(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = _eval_scalar(f, base)
        flat[i] = orig - step
        f_minus = _eval_scalar(f, base)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Compare the tape gradient of ``f`` at ``x`` against central differences.

    Returns the max relative error over coordinates.  NaNs propagate into the
    result so a caller's threshold comparison fails.
    """
    var = Tensor(np.array(x.data, dtype=np.float64, copy=True), requires_grad=True)
    with Tape() as tape:
        y = f(var)
    if y.size != 1:
        raise ShapeError("grad_check", [y.shape], "f must return a scalar")
    analytic = backward(tape, y, leaves=[var])[var].data
    numeric = numeric_gradient(f, var, step)
    return relative_error(analytic, numeric)
