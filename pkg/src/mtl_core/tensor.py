"""
Dense float64 tensors with a recording tape for reverse-mode differentiation.

Only the operations needed by MLP-scale multitask models are provided:
matmul, bias add, elementwise arithmetic, ReLU, sigmoid, reductions, the
soft-threshold operator and the task losses. Every op checks its result for
NaN/Inf and raises instead of propagating them.
"""
import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .errors import (
    DegenerateInputError,
    DimensionError,
    NonFiniteError,
    TapeError,
    ThresholdError,
    UnknownOpError,
)

log = logging.getLogger(__name__)

BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("amtl_active_tape", default=None)

ELEMENTWISE_KINDS = ("add", "sub", "mul", "relu", "sigmoid", "abs", "sign", "scale")
LOSS_KINDS = ("cross-entropy", "l1", "negative-cosine", "mse")


class Tensor:
    """A float64 array with an optional gradient of the same shape."""

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional["ComputationTape"] = None
        self._producer: Optional[int] = None

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        out.requires_grad = requires_grad
        out.name = None
        out._tape = None
        out._producer = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def is_leaf(self) -> bool:
        return self._producer is None

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return elementwise("add", self, _as_tensor(other, like=self))

    def __radd__(self, other):
        return elementwise("add", _as_tensor(other, like=self), self)

    def __sub__(self, other):
        return elementwise("sub", self, _as_tensor(other, like=self))

    def __mul__(self, other):
        if np.isscalar(other):
            return elementwise("scale", self, factor=float(other))
        return elementwise("mul", self, _as_tensor(other, like=self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return elementwise("scale", self, factor=-1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_rule: BackwardRule


class ComputationTape:
    """
    Ordered record of the ops executed while the tape is active.

    Use as a context manager; ops whose inputs require gradients are appended
    in execution order, so the list is topologically sorted by construction.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.last_visit_order: List[str] = []
        self._token = None

    def __enter__(self) -> "ComputationTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, rule: BackwardRule):
        output._tape = self
        output._producer = len(self.nodes)
        self.nodes.append(TapeNode(op, inputs, output, rule))

    def leaves(self) -> List[Tensor]:
        seen = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.is_leaf and t.requires_grad:
                    seen[id(t)] = t
        return list(seen.values())

    def zero_grad(self):
        """Reset the gradients of every leaf seen on this tape."""
        for leaf in self.leaves():
            leaf.grad = None

    def backward(self, root: Tensor):
        if root._tape is not self or root._producer is None:
            raise TapeError("backward() called before a forward pass was recorded for this root")
        if root.values.size != 1:
            raise TapeError(f"backward() needs a scalar root, got shape {root.shape}")

        pending = {id(root): np.ones_like(root.values)}
        visited = []
        for node in reversed(self.nodes[: root._producer + 1]):
            g_out = pending.pop(id(node.output), None)
            if g_out is None:
                continue
            visited.append(node.op)
            for t, g in zip(node.inputs, node.backward_rule(g_out)):
                if g is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                    _check_finite(t.grad, f"gradient of {t.name or 'leaf'}")
                else:
                    key = id(t)
                    pending[key] = pending[key] + g if key in pending else g
        self.last_visit_order = visited


def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into every requires_grad leaf reachable from root."""
    if root._tape is None:
        raise TapeError("backward() called before a forward pass was recorded")
    root._tape.backward(root)


def _check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{what} produced non-finite values")


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if like is not None and arr.ndim == 0:
        arr = np.full(like.shape, float(arr))
    return Tensor(arr)


def _emit(op: str, inputs: Tuple[Tensor, ...], values: np.ndarray, rule: BackwardRule) -> Tensor:
    _check_finite(values, op)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, requires)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and requires:
        tape.record(op, inputs, out, rule)
    return out


# ----------------------------------------------------------------------
# --- Linear algebra ---
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def rule(g):
        return g @ bv.T, av.T @ g

    return _emit("matmul", (a, b), av @ bv, rule)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-broadcast bias add: x[n×k] + b[k]."""
    if x.values.ndim != 2 or bias.values.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: shapes {x.shape} and {bias.shape} are incompatible")

    def rule(g):
        return g, g.sum(axis=0)

    return _emit("add_bias", (x, bias), x.values + bias.values, rule)


# ----------------------------------------------------------------------
# --- Elementwise ---
# ----------------------------------------------------------------------

def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None, *, factor: Optional[float] = None) -> Tensor:
    if op_kind not in ELEMENTWISE_KINDS:
        raise UnknownOpError(f"unknown elementwise op '{op_kind}'; expected one of {ELEMENTWISE_KINDS}")
    av = a.values

    if op_kind in ("add", "sub", "mul"):
        if b is None:
            raise DimensionError(f"{op_kind} needs two operands")
        if a.shape != b.shape:
            raise DimensionError(f"{op_kind}: shape mismatch {a.shape} vs {b.shape}")
        bv = b.values
        if op_kind == "add":
            return _emit("add", (a, b), av + bv, lambda g: (g, g))
        if op_kind == "sub":
            return _emit("sub", (a, b), av - bv, lambda g: (g, -g))
        return _emit("mul", (a, b), av * bv, lambda g: (g * bv, g * av))

    if op_kind == "scale":
        if factor is None:
            raise UnknownOpError("scale needs a constant factor")
        c = float(factor)
        return _emit("scale", (a,), av * c, lambda g: (g * c,))

    if op_kind == "relu":
        # subgradient 0 at x == 0
        active = av > 0.0
        return _emit("relu", (a,), np.where(active, av, 0.0), lambda g: (g * active,))

    if op_kind == "sigmoid":
        s = expit(av)
        return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))

    if op_kind == "abs":
        sgn = np.sign(av)
        return _emit("abs", (a,), np.abs(av), lambda g: (g * sgn,))

    # sign: piecewise constant
    return _emit("sign", (a,), np.sign(av), lambda g: (np.zeros_like(g),))


def scale(a: Tensor, factor: float) -> Tensor:
    return elementwise("scale", a, factor=factor)


def relu(a: Tensor) -> Tensor:
    return elementwise("relu", a)


def sigmoid(a: Tensor) -> Tensor:
    return elementwise("sigmoid", a)


# ----------------------------------------------------------------------
# --- Reductions ---
# ----------------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", (a,), np.asarray(a.values.sum()), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _emit("mean", (a,), np.asarray(a.values.mean()), lambda g: (np.full(shape, float(g) / n),))


def add_scalars(terms: Sequence[Tensor]) -> Tensor:
    """Sum of scalar tensors as a single tape node."""
    if not terms:
        raise DimensionError("add_scalars needs at least one term")
    for t in terms:
        if t.size != 1:
            raise DimensionError(f"add_scalars expects scalars, got shape {t.shape}")
    total = np.asarray(sum(t.item() for t in terms))
    return _emit("add_scalars", tuple(terms), total, lambda g: tuple(np.reshape(g, t.shape) for t in terms))


# ----------------------------------------------------------------------
# --- Soft threshold ---
# ----------------------------------------------------------------------

def soft_threshold_values(w: np.ndarray, alpha: float) -> np.ndarray:
    """sign(w)·max(|w| − α, 0) on a plain array."""
    return np.sign(w) * np.maximum(np.abs(w) - alpha, 0.0)


def soft_threshold(w: Tensor, alpha: Union[Tensor, float]) -> Tensor:
    """
    Shrinkage operator with its own backward rule.

    d/dw is the indicator |w| > α (the weight survives); d/dα is −sign(w)
    summed over survivors. Ties |w| == α count as pruned.
    """
    alpha_t = alpha if isinstance(alpha, Tensor) else None
    a = alpha_t.item() if alpha_t is not None else float(alpha)
    if not (0.0 <= a < 1.0):
        raise ThresholdError(f"soft threshold alpha must lie in [0, 1), got {a}")
    wv = w.values
    survive = np.abs(wv) > a
    sgn = np.sign(wv)
    out = np.where(survive, sgn * (np.abs(wv) - a), 0.0)

    if alpha_t is None:
        return _emit("soft_threshold", (w,), out, lambda g: (g * survive,))

    def rule(g):
        g_alpha = -np.sum(sgn * g * survive)
        return g * survive, np.reshape(g_alpha, alpha_t.shape)

    return _emit("soft_threshold", (w, alpha_t), out, rule)


# ----------------------------------------------------------------------
# --- Losses ---
# ----------------------------------------------------------------------

def _rows(arr: np.ndarray) -> np.ndarray:
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def loss_fn(kind: str, prediction: Tensor, target) -> Tensor:
    """
    Mean task loss over the batch as a scalar tensor.

    kind: cross-entropy (softmax over logits; targets are class indices or
    one-hot rows), l1, mse, negative-cosine (row-wise).
    """
    if kind not in LOSS_KINDS:
        raise UnknownOpError(f"unknown loss kind '{kind}'; expected one of {LOSS_KINDS}")
    p = _rows(prediction.values)
    y = np.asarray(target.values if isinstance(target, Tensor) else target, dtype=np.float64)
    pshape = prediction.shape

    if kind == "cross-entropy":
        n, k = p.shape
        if y.shape == p.shape or (y.ndim == 1 and y.shape[0] == k and n == 1 and prediction.values.ndim == 1):
            onehot = _rows(y)
        else:
            idx = np.atleast_1d(y).astype(np.int64)
            if idx.shape != (n,):
                raise DimensionError(f"cross-entropy: {n} logit rows but targets of shape {y.shape}")
            if np.any(idx < 0) or np.any(idx >= k) or np.any(idx != np.atleast_1d(y)):
                raise DimensionError(f"cross-entropy: class indices must be integers in [0, {k})")
            onehot = np.zeros_like(p)
            onehot[np.arange(n), idx] = 1.0
        logp = log_softmax(p, axis=1)
        value = -np.sum(onehot * logp) / n
        probs = softmax(p, axis=1)

        def rule(g):
            return (np.reshape(float(g) * (probs * onehot.sum(axis=1, keepdims=True) - onehot) / n, pshape),)

        return _emit("loss:cross-entropy", (prediction,), np.asarray(value), rule)

    y = _rows(y)
    if y.shape != p.shape:
        raise DimensionError(f"{kind}: prediction shape {pshape} vs target shape {y.shape}")
    diff = p - y
    n_elem = p.size

    if kind == "l1":
        sgn = np.sign(diff)
        return _emit("loss:l1", (prediction,), np.asarray(np.abs(diff).mean()),
                     lambda g: (np.reshape(float(g) * sgn / n_elem, pshape),))

    if kind == "mse":
        return _emit("loss:mse", (prediction,), np.asarray(np.mean(diff ** 2)),
                     lambda g: (np.reshape(float(g) * 2.0 * diff / n_elem, pshape),))

    # negative-cosine
    n = p.shape[0]
    pn = np.linalg.norm(p, axis=1, keepdims=True)
    yn = np.linalg.norm(y, axis=1, keepdims=True)
    if np.any(pn == 0.0) or np.any(yn == 0.0):
        raise DegenerateInputError("negative-cosine: zero-norm vector in prediction or target")
    cos = np.sum(p * y, axis=1, keepdims=True) / (pn * yn)

    def rule(g):
        dcos = y / (pn * yn) - cos * p / (pn ** 2)
        return (np.reshape(-float(g) * dcos / n, pshape),)

    return _emit("loss:negative-cosine", (prediction,), np.asarray(-cos.mean()), rule)
