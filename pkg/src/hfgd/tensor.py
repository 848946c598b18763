"""Dense float64 tensors with a small reverse-mode differentiation engine.

Every op returns a new :class:`Tensor`. When any input requires a gradient
(and recording is enabled), the output keeps references to its inputs plus a
closure mapping the output gradient to per-input gradients. ``stop_gradient``
keeps the link to its source for reachability queries but never forwards a
gradient through it.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "EmptyLossError",
    "GraphConsumedError",
    "no_grad",
    "is_grad_enabled",
    "parameter",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "softmax",
    "cross_entropy",
    "l2_normalize",
    "stop_gradient",
    "backward",
    "GradientMap",
    "reachable",
    "finite_diff_check",
    "FiniteDiffReport",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class EmptyLossError(ValueError):
    """Every position of a loss was ignored."""


class GraphConsumedError(RuntimeError):
    """backward() was called on a graph already freed by a previous call."""


_GRAD_ENABLED = True

# Barrier tape used by finite_diff_check: in "record" mode stop_gradient
# appends its forward value, in "replay" mode it returns the recorded value.
_TAPE: dict | None = None


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _freed(_g):
    raise GraphConsumedError(
        "graph was freed by an earlier backward(); pass retain_graph=True to reuse it"
    )


class Tensor:
    """An n-d float64 array that may sit in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- introspection ---------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents and self.op == "leaf"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, tuple(range(self.ndim))[::-1])


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor that accumulates gradient."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- elementwise -------------------------------------------------------------

def _channel_view(a_shape: tuple, b_shape: tuple):
    """Reshape target for per-channel broadcasting of b against a, or None."""
    if len(b_shape) == 1 and len(a_shape) >= 2 and b_shape[0] == a_shape[1]:
        return (1, b_shape[0]) + (1,) * (len(a_shape) - 2)
    return None


def _channel_reduce(g: np.ndarray) -> np.ndarray:
    axes = (0,) + tuple(range(2, g.ndim))
    return g.sum(axis=axes)


def _check_binary(a: Tensor, b: Tensor, opname: str):
    if a.shape == b.shape:
        return None
    view = _channel_view(a.shape, b.shape)
    if view is None:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")
    return view


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _node(a.data + c, (a,), lambda g: (g,), "add")
    view = _check_binary(a, b, "add")
    if view is None:
        return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")
    return _node(a.data + b.data.reshape(view), (a, b),
                 lambda g: (g, _channel_reduce(g)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    view = _check_binary(a, b, "sub")
    if view is None:
        return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")
    return _node(a.data - b.data.reshape(view), (a, b),
                 lambda g: (g, -_channel_reduce(g)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, b)
    view = _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    if view is None:
        return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    bv = bd.reshape(view)
    return _node(ad * bv, (a, b), lambda g: (g * bv, _channel_reduce(g * ad)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# -- linear algebra and shape ops -------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(M,K)@(K,N) or batched (G,M,K)@(G,K,N); no other broadcasting."""
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or bd.ndim != ad.ndim:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if ad.shape[-1] != bd.shape[-2] or (ad.ndim == 3 and ad.shape[0] != bd.shape[0]):
        raise ShapeError(f"matmul: inner dimensions disagree {a.shape} @ {b.shape}")

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _node(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    src = a.shape
    if axis is None:
        return _node(np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, src).copy(),), "sum")
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)
    keep = tuple(1 if i in axes else n for i, n in enumerate(src))
    return _node(a.data.sum(axis=axes), (a,),
                 lambda g: (np.broadcast_to(g.reshape(keep), src).copy(),), "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis), 1.0 / n)


# -- normalizers and losses ----------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
    s = _softmax_np(a.data, axis)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), backward, "softmax")


def cross_entropy(logits: Tensor, labels, ignore_index: int = 255) -> Tensor:
    """Mean negative log-likelihood over rows whose label is not ignored."""
    x = logits.data
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy expects N x C logits, got {logits.shape}")
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    n, c = x.shape
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} logit rows but {labels.shape[0]} labels")
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy: every position is ignored")
    lab = labels[valid]
    if lab.min() < 0 or lab.max() >= c:
        raise IndexError(f"cross_entropy: label outside [0, {c}) and not ignore_index")
    rows = np.nonzero(valid)[0]
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    logp = x - lse
    loss = -logp[rows, lab].sum() / count

    def backward(g):
        p = np.exp(logp)
        p[rows, lab] -= 1.0
        p[~valid] = 0.0
        return (p * (g / count),)

    return _node(np.asarray(loss), (logits,), backward, "cross_entropy")


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = a.data / denom
    clipped = norm < eps

    def backward(g):
        gx = (g - y * (g * y).sum(axis=axis, keepdims=True)) / denom
        if clipped.any():
            gx = np.where(clipped, g / denom, gx)
        return (gx,)

    return _node(y, (a,), backward, "l2_normalize")


# -- the barrier -------------------------------------------------------------------

def stop_gradient(a: Tensor, name: str | None = None) -> Tensor:
    """Identity forward; contributes exactly zero gradient to ``a``."""
    data = a.data
    if _TAPE is not None:
        if _TAPE["mode"] == "record":
            _TAPE["values"].append(data)
            _TAPE["names"].append(name or f"stop_gradient#{len(_TAPE['names'])}")
        else:
            data = _TAPE["values"][_TAPE["pos"]]
            _TAPE["pos"] += 1
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._backward = None
    out.op = "stop_gradient"
    out.name = name
    # keep the source only for reachability queries
    out._parents = (a,) if (_GRAD_ENABLED and a.requires_grad) else ()
    return out


# -- backward ----------------------------------------------------------------------

class GradientMap(dict):
    """name -> gradient array; ``reached`` names the parameters the loss
    depends on through at least one barrier-free path."""

    reached: frozenset = frozenset()


def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.requires_grad:
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None,
             retain_graph: bool = False) -> GradientMap:
    """Gradient of a scalar loss with respect to each named leaf parameter.

    Parameters the loss cannot reach get an all-zero entry. Unless
    ``retain_graph`` is set, the graph is freed and a second call raises
    :class:`GraphConsumedError`.
    """
    if loss.data.size != 1 or loss.ndim not in (0, 1):
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = dict(params or {})
    for name, p in params.items():
        if not p.is_leaf:
            raise ValueError(f"parameter {name!r} is not a leaf tensor (op={p.op})")

    leaf_grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        if loss._backward is _freed:
            _freed(None)
        order = _topo(loss)
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaf_grads[id(node)] = g
                continue
            if node._backward is _freed:
                _freed(None)
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                prev = grads.get(key)
                grads[key] = gp if prev is None else prev + gp
        if not retain_graph:
            for node in order:
                if node._backward is not None:
                    node._backward = _freed
                    node._parents = ()

    out = GradientMap()
    reached = []
    for name, p in params.items():
        g = leaf_grads.get(id(p))
        if g is None:
            out[name] = np.zeros_like(p.data)
        else:
            out[name] = np.array(np.broadcast_to(g, p.shape), dtype=np.float64)
            reached.append(name)
    out.reached = frozenset(reached)
    return out


def reachable(root: Tensor, through_barriers: bool = False) -> set:
    """ids of every tensor on a path to ``root``.

    By default paths through a stop_gradient node do not count, which is
    exactly the set that can receive gradient.
    """
    seen = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "stop_gradient" and not through_barriers:
            continue
        stack.extend(node._parents)
    return seen


# -- finite differences ----------------------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_err: float
    max_abs_err: float
    checked: int
    barriers: list = field(default_factory=list)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def _rel_err(a: np.ndarray, n: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(f: Callable[[], Tensor], inputs: Mapping[str, Tensor] | Tensor,
                      eps: float = 1e-5, max_coords: int | None = None,
                      seed: int = 0, floor: float = 1e-6) -> FiniteDiffReport:
    """Compare backward() against central differences.

    ``f`` takes no arguments and reads the tensors in ``inputs``, whose
    ``data`` is swapped in place for each perturbation. stop_gradient outputs
    are frozen at their unperturbed values during the perturbed evaluations,
    so the numeric derivative treats barriers as constants just like the
    analytic one; each barrier met is listed in the report as excluded.
    ``max_coords`` caps the coordinates probed per input (sampled with
    ``seed``).
    """
    global _TAPE
    if isinstance(inputs, Tensor):
        inputs = {"x": inputs}
    tape = {"mode": "record", "values": [], "names": [], "pos": 0}
    _TAPE = tape
    try:
        out = f()
    finally:
        _TAPE = None
    analytic = backward(out, inputs)
    tape["mode"] = "replay"

    rng = np.random.default_rng(seed)
    worst_rel, worst_abs, checked = 0.0, 0.0, 0
    for name, t in inputs.items():
        base = t.data
        idx = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            idx = np.sort(rng.choice(base.size, size=max_coords, replace=False))
        num = np.empty(idx.size)
        try:
            for j, i in enumerate(idx):
                vals = []
                for sign in (1.0, -1.0):
                    pert = base.copy().reshape(-1)
                    pert[i] += sign * eps
                    t.data = pert.reshape(base.shape)
                    tape["pos"] = 0
                    _TAPE = tape
                    try:
                        with no_grad():
                            vals.append(f().item())
                    finally:
                        _TAPE = None
                num[j] = (vals[0] - vals[1]) / (2 * eps)
        finally:
            t.data = base
        ana = analytic[name].reshape(-1)[idx]
        if idx.size:
            worst_rel = max(worst_rel, float(_rel_err(ana, num, floor).max()))
            worst_abs = max(worst_abs, float(np.abs(ana - num).max()))
        checked += idx.size
    barriers = [f"{n}: barrier, excluded" for n in tape["names"]]
    return FiniteDiffReport(worst_rel, worst_abs, checked, barriers)

