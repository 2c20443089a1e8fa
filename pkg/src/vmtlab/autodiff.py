"""A small define-by-run reverse-mode differentiation engine.

Every value is a :class:`Tensor` wrapping a float64 ndarray. Tensors created
through a :class:`Tape` are recorded; operations whose inputs are all
untracked return untracked tensors and cost nothing on the tape. A fresh tape
is built for every training step.

>>> tape = Tape()
>>> x = tape.variable([-1.0, 2.0])
>>> y = mean(relu(x))
>>> backward(tape, y)[x.node_id]
array([0. , 0.5])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .kernels import LOG_FLOOR


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NumericOverflowError(AutodiffError, FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar over the primitive functions below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    kind: str
    inputs: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def variable(self, data) -> Tensor:
        """Register a leaf whose gradient the caller wants."""
        arr = np.array(data, dtype=np.float64)
        _check_finite("leaf", arr)
        self.nodes.append(Node("leaf", (), None))
        return Tensor(arr, self, len(self.nodes) - 1)

    def record(self, kind: str, value: np.ndarray, inputs: Sequence[int | None], vjp) -> Tensor:
        self.nodes.append(Node(kind, tuple(inputs), vjp))
        return Tensor(value, self, len(self.nodes) - 1)

    def __len__(self):
        return len(self.nodes)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def stop_gradient(t) -> Tensor:
    return Tensor(_data(t))


def _data(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def _check_finite(kind: str, value: np.ndarray) -> None:
    if not np.isfinite(value).all():
        raise NumericOverflowError(f"{kind}: non-finite value in output of shape {value.shape}")


# ---------------------------------------------------------------------------
# primitive table
#
# Each entry maps kind -> (forward, backward). ``forward(*arrays, **attrs)``
# returns (value, saved); ``backward(g, saved, *arrays, **attrs)`` returns one
# cotangent per input.
# ---------------------------------------------------------------------------

def _shape_error(kind, a, b):
    return ShapeError(f"{kind}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        return a @ b, None


def _matmul_bwd(g, _s, a, b, *, needs=(True, True)):
    return (g @ b.T if needs[0] else None), (a.T @ g if needs[1] else None)


def _binary_check(kind, a, b):
    # same shape, trailing-axis bias (n, k) + (k,), or a 0-d scalar operand
    if a.shape == b.shape or b.ndim == 0:
        return
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    raise _shape_error(kind, a, b)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.sum(axis=0)


def _add_fwd(a, b):
    _binary_check("add", a, b)
    return a + b, None


def _add_bwd(g, _s, a, b):
    return g, _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _binary_check("sub", a, b)
    return a - b, None


def _sub_bwd(g, _s, a, b):
    return g, -_unbroadcast(g, b.shape)


def _mul_fwd(a, b):
    if a.shape != b.shape:
        raise _shape_error("mul", a, b)
    return a * b, None


def _mul_bwd(g, _s, a, b):
    return g * b, g * a


def _scale_fwd(a, *, c):
    return a * c, None


def _scale_bwd(g, _s, a, *, c):
    return (g * c,)


def _neg_fwd(a):
    return -a, None


def _neg_bwd(g, _s, a):
    return (-g,)


def _relu_fwd(a):
    mask = a > 0
    return np.where(mask, a, 0.0), mask


def _relu_bwd(g, mask, a):
    return (np.where(mask, g, 0.0),)


def _exp_fwd(a):
    with np.errstate(over="ignore"):
        out = np.exp(a)
    return out, out


def _exp_bwd(g, out, a):
    return (g * out,)


def _log_fwd(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(a), None


def _log_bwd(g, _s, a):
    return (g / a,)


def _safe_log_fwd(a):
    return np.log(np.maximum(a, LOG_FLOOR)), None


def _safe_log_bwd(g, _s, a):
    return (np.where(a > LOG_FLOOR, g / np.maximum(a, LOG_FLOOR), 0.0),)


def _sum_fwd(a, *, axis=None):
    return np.asarray(a.sum(axis=axis)), None


def _sum_bwd(g, _s, a, *, axis=None):
    if axis is None:
        return (np.broadcast_to(g, a.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


def _mean_fwd(a, *, axis=None):
    if a.size == 0:
        raise ShapeError("mean: empty input")
    return np.asarray(a.mean(axis=axis)), None


def _mean_bwd(g, _s, a, *, axis=None):
    count = a.size if axis is None else a.shape[axis]
    (full,) = _sum_bwd(g, None, a, axis=axis)
    return (full / count,)


def _rows_fwd(a, *, index):
    return a[index], None


def _rows_bwd(g, _s, a, *, index):
    out = np.zeros_like(a)
    np.add.at(out, index, g)
    return (out,)


def _concat_fwd(*arrays):
    tail = {arr.shape[1:] for arr in arrays}
    if len(tail) != 1:
        raise ShapeError(f"concat: trailing shapes differ: {sorted(tail)}")
    return np.concatenate(arrays, axis=0), None


def _concat_bwd(g, _s, *arrays):
    bounds = np.cumsum([arr.shape[0] for arr in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=0))


def _softmax_fwd(z):
    if z.ndim != 2:
        raise ShapeError(f"softmax: expected (rows, classes), got {z.shape}")
    if z.shape[1] == 0:
        raise ShapeError("softmax: empty class axis")
    s = kernels.softmax_rows(z)
    return s, s


def _softmax_bwd(g, s, z):
    return (kernels.softmax_rows_vjp(s, g),)


def _sigmoid_fwd(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out, out


def _sigmoid_bwd(g, out, z):
    return (g * out * (1.0 - out),)


def _clip_fwd(a, *, lo, hi):
    return np.clip(a, lo, hi), None


def _clip_bwd(g, _s, a, *, lo, hi):
    return (np.where((a >= lo) & (a <= hi), g, 0.0),)


def _dense_fwd(x, w, b, *, relu):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise _shape_error("dense", x, w)
    if b.shape != (w.shape[1],):
        raise _shape_error("dense", w, b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = kernels.bias_act_(x @ w, b, relu)
    return out, out


def _dense_bwd(g, out, x, w, b, *, relu, needs=(True, True, True)):
    gz, gb = kernels.bias_act_vjp(out, g, relu)
    return (gz @ w.T if needs[0] else None), (x.T @ gz if needs[1] else None), gb


def _slice_rows_fwd(a, *, start, stop):
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape[0]} rows")
    return a[start:stop], None


def _slice_rows_bwd(g, _s, a, *, start, stop):
    out = np.zeros_like(a)
    out[start:stop] = g
    return (out,)


def _prob_rows_check(kind, p, q=None):
    if p.ndim != 2:
        raise ShapeError(f"{kind}: expected (rows, classes), got {p.shape}")
    if q is not None and p.shape != q.shape:
        raise _shape_error(kind, p, q)


def _kl_rows_fwd(p, q):
    _prob_rows_check("kl_rows", p, q)
    return kernels.kl_rows(p, q), None


def _kl_rows_bwd(g, _s, p, q):
    return kernels.kl_rows_vjp(p, q, g)


def _entropy_rows_fwd(p):
    _prob_rows_check("entropy_rows", p)
    return kernels.entropy_rows(p), None


def _entropy_rows_bwd(g, _s, p):
    return (kernels.entropy_rows_vjp(p, g),)


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "neg": (_neg_fwd, _neg_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "exp": (_exp_fwd, _exp_bwd),
    "log": (_log_fwd, _log_bwd),
    "safe_log": (_safe_log_fwd, _safe_log_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "rows": (_rows_fwd, _rows_bwd),
    "slice_rows": (_slice_rows_fwd, _slice_rows_bwd),
    "dense": (_dense_fwd, _dense_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "clip": (_clip_fwd, _clip_bwd),
    "kl_rows": (_kl_rows_fwd, _kl_rows_bwd),
    "entropy_rows": (_entropy_rows_fwd, _entropy_rows_bwd),
}


# primitives whose backward can skip cotangents of untracked inputs
_SKIPS_UNTRACKED = frozenset({"matmul", "dense"})


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Evaluate primitive ``kind`` and, if any input is tracked, record it."""
    try:
        fwd, bwd = PRIMITIVES[kind]
    except KeyError:
        raise AutodiffError(f"unknown primitive {kind!r}") from None
    tensors = [x if isinstance(x, Tensor) else constant(x) for x in inputs]
    arrays = [t.data for t in tensors]
    value, saved = fwd(*arrays, **attrs)
    value = np.asarray(value, dtype=np.float64)
    _check_finite(kind, value)

    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise AutodiffError(f"{kind}: inputs recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)

    if kind in _SKIPS_UNTRACKED:
        attrs = dict(attrs, needs=tuple(t.tape is not None for t in tensors))

    def vjp(g):
        return bwd(g, saved, *arrays, **attrs)

    return tape.record(kind, value, [t.node_id for t in tensors], vjp)


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Gradients of scalar ``root`` for every node that reaches it.

    Returns a map node_id -> gradient array; fan-out contributions are summed.
    """
    if root.data.ndim != 0 and root.data.size != 1:
        raise AutodiffError(f"backward: root must be scalar, got shape {root.shape}")
    if root.tape is not tape or root.node_id is None:
        raise AutodiffError("backward: root is not recorded on this tape")
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for nid in range(root.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.vjp is None:
            continue
        for src, contrib in zip(node.inputs, node.vjp(g)):
            if src is None or contrib is None:
                continue
            if src in grads:
                grads[src] = grads[src] + contrib
            else:
                grads[src] = contrib
    return grads


def grad(tape: Tape, root: Tensor, wrt: Tensor) -> np.ndarray:
    """Gradient of ``root`` w.r.t. one tensor (zeros if unreachable)."""
    g = backward(tape, root).get(wrt.node_id)
    return np.zeros_like(wrt.data) if g is None else np.asarray(g)


# ---------------------------------------------------------------------------
# public op wrappers
# ---------------------------------------------------------------------------

def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def scale(a, c: float):
    return apply_primitive("scale", [a], c=float(c))


def neg(a):
    return apply_primitive("neg", [a])


def relu(a):
    return apply_primitive("relu", [a])


def exp(a):
    return apply_primitive("exp", [a])


def log(a):
    return apply_primitive("log", [a])


def safe_log(a):
    """ln(max(a, 1e-30)); reserved for entropy/KL compositions."""
    return apply_primitive("safe_log", [a])


def sum(a, axis: int | None = None):  # noqa: A001 - mirrors numpy naming
    return apply_primitive("sum", [a], axis=axis)


def mean(a, axis: int | None = None):
    return apply_primitive("mean", [a], axis=axis)


def rows(a, index):
    return apply_primitive("rows", [a], index=np.asarray(index))


def slice_rows(a, start: int, stop: int):
    return apply_primitive("slice_rows", [a], start=int(start), stop=int(stop))


def dense(x, w, b, relu: bool = False):
    """Fused affine layer x @ w + b, optionally followed by relu."""
    return apply_primitive("dense", [x, w, b], relu=bool(relu))


def concat(tensors):
    return apply_primitive("concat", list(tensors))


def softmax(z):
    return apply_primitive("softmax", [z])


def sigmoid(z):
    return apply_primitive("sigmoid", [z])


def clip(a, lo: float, hi: float):
    return apply_primitive("clip", [a], lo=float(lo), hi=float(hi))


def kl_rows(p, q):
    """Per-row KL(p || q) with 0 ln 0 = 0 and a 1e-30 floor inside ln."""
    return apply_primitive("kl_rows", [p, q])


def entropy_rows(p):
    return apply_primitive("entropy_rows", [p])


def linear(x, w, b):
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    analytic: np.ndarray
    numeric: np.ndarray

    def __str__(self):
        verdict = "pass" if self.passed else f"FAIL at {self.worst_index}"
        return f"grad check {verdict}: max rel err {self.max_rel_error:.3e}"


def numeric_gradient(fn: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    point = np.array(point, dtype=np.float64)
    out = np.zeros_like(point)
    flat = point.reshape(-1)
    grad_flat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(point))
        flat[i] = orig - step
        fm = float(fn(point))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = np.unravel_index(i, point.shape)
            raise NumericOverflowError(f"finite difference probe at coordinate {idx} is non-finite")
        grad_flat[i] = (fp - fm) / (2.0 * step)
    return out


def finite_diff_check(fn, point, step: float = 1e-5, tol: float = 1e-4, kink_retries: int = 2) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn(tensor)`` against central differences.

    ``fn`` receives a Tensor (tracked for the analytic pass, untracked for the
    numeric probes) and must return a scalar Tensor or float.

    ReLU kinks inside [x - step, x + step] spoil the central difference. Each
    coordinate is therefore also estimated at step/4; where the two estimates
    disagree beyond rounding noise the smaller-step estimate is used, repeated
    up to ``kink_retries`` times. ``kink_retries=0`` gives the plain check.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.variable(point)
    out = fn(x)
    if isinstance(out, Tensor) and out.tracked:
        analytic = grad(tape, out, x)
    else:
        analytic = np.zeros_like(point)

    def scalar(p):
        val = fn(constant(p))
        return val.item() if isinstance(val, Tensor) else float(val)

    numeric = numeric_gradient(scalar, point, step)
    h = step
    for _ in range(kink_retries):
        finer = numeric_gradient(scalar, point, h / 4)
        # rounding noise of a central difference is about eps * |f| / h
        noise = 1e-14 * max(abs(scalar(point)), 1.0) / (h / 4)
        unstable = np.abs(finer - numeric) > 10 * noise + 1e-6 * np.abs(finer)
        if not unstable.any():
            break
        numeric = np.where(unstable, finer, numeric)
        h /= 4
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    if rel.size == 0:
        return GradCheckReport(True, 0.0, None, analytic, numeric)
    worst = int(np.argmax(rel))
    max_rel = float(rel.reshape(-1)[worst])
    passed = max_rel <= tol
    idx = None if passed else tuple(int(i) for i in np.unravel_index(worst, rel.shape))
    return GradCheckReport(passed, max_rel, idx, analytic, numeric)
