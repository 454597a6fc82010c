"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable result keeps a reference to the node that produced it
(operation name, parent tensors, vector-Jacobian product).  ``backward``
linearises that graph into a :class:`Tape` and sweeps it in reverse.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised for shape mismatches and degenerate extents."""


class DomainError(ValueError):
    """Raised when an op receives values outside its mathematical domain."""


class Tensor:
    """Immutable n-dimensional float64 array that may participate in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @classmethod
    def _result(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"], vjp: Callable) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.node_id = next(_node_ids)
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out.parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor_from(data: Sequence[float], shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    """Build a tensor from a flat row-major list and an explicit shape."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {list(shape)}")
    flat = np.array(data, dtype=np.float64).reshape(-1)
    if flat.size != int(np.prod(shape)):
        raise ShapeError(f"data length {flat.size} does not match shape {list(shape)} (needs {int(np.prod(shape))})")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise unary ops

def _unary(t: Tensor, op: str, out: np.ndarray, dfdx: Callable[[], np.ndarray]) -> Tensor:
    return Tensor._result(out, op, (t,), lambda g: (g * dfdx(),))


def neg(t: Tensor) -> Tensor:
    return Tensor._result(-t.data, "neg", (t,), lambda g: (-g,))


def sqrt(t: Tensor) -> Tensor:
    if np.any(t.data <= 0):
        raise DomainError("sqrt requires strictly positive input; add the epsilon guard first")
    out = np.sqrt(t.data)
    return _unary(t, "sqrt", out, lambda: 0.5 / out)


def log(t: Tensor) -> Tensor:
    if np.any(t.data <= 0):
        raise DomainError("log requires strictly positive input; clamp first")
    x = t.data
    return _unary(t, "log", np.log(x), lambda: 1.0 / x)


def exp(t: Tensor) -> Tensor:
    out = np.exp(t.data)
    return _unary(t, "exp", out, lambda: out)


def tanh(t: Tensor) -> Tensor:
    out = np.tanh(t.data)
    return _unary(t, "tanh", out, lambda: 1.0 - out * out)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(t: Tensor) -> Tensor:
    out = _sigmoid_np(t.data)
    return _unary(t, "sigmoid", out, lambda: out * (1.0 - out))


def log_sigmoid(t: Tensor) -> Tensor:
    """log(1 / (1 + exp(-x))) without overflow for large |x|."""
    x = t.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _unary(t, "log_sigmoid", out, lambda: _sigmoid_np(-x))


def relu(t: Tensor) -> Tensor:
    x = t.data
    return _unary(t, "relu", np.maximum(x, 0.0), lambda: (x > 0).astype(np.float64))


def clamp(t: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is passed through inside and zeroed outside."""
    if lo > hi:
        raise ValueError(f"clamp bounds inverted: lo={lo} > hi={hi}")
    x = t.data
    return _unary(t, "clamp", np.clip(x, lo, hi), lambda: ((x >= lo) & (x <= hi)).astype(np.float64))


def square(t: Tensor) -> Tensor:
    x = t.data
    return _unary(t, "square", x * x, lambda: 2.0 * x)


_UNARY = {
    "neg": neg,
    "sqrt": sqrt,
    "tanh": tanh,
    "log": log,
    "exp": exp,
    "sigmoid": sigmoid,
    "relu": relu,
    "square": square,
    "log_sigmoid": log_sigmoid,
}


def ew_unary(t: Tensor, kind: str, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Dispatch an elementwise op by name (``clamp`` takes ``lo``/``hi``)."""
    if kind == "clamp":
        if lo is None or hi is None:
            raise ValueError("clamp needs lo and hi")
        return clamp(t, lo, hi)
    try:
        fn = _UNARY[kind]
    except KeyError:
        raise ValueError(f"unknown unary op {kind!r}") from None
    return fn(t)


# ---------------------------------------------------------------------------
# elementwise binary ops with singleton broadcasting

def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    # scalars broadcast anywhere; otherwise ranks must match and each axis
    # must agree or be 1
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise ShapeError(f"cannot broadcast {list(a)} with {list(b)}: rank differs")
    out = []
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"cannot broadcast {list(a)} with {list(b)}")
        out.append(max(x, y))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary_prep(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    return Tensor._result(a.data + b.data, "add", (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    return Tensor._result(a.data - b.data, "sub", (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    x, y = a.data, b.data
    return Tensor._result(x * y, "mul", (a, b),
                          lambda g: (_unbroadcast(g * y, a.shape), _unbroadcast(g * x, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_prep(a, b)
    x, y = a.data, b.data
    if np.any(y == 0):
        raise DomainError("division by a tensor containing zero")
    out = x / y
    return Tensor._result(out, "div", (a, b),
                          lambda g: (_unbroadcast(g / y, a.shape), _unbroadcast(-g * out / y, b.shape)))


def ew_binary(a, b, kind: str) -> Tensor:
    fn = {"add": add, "sub": sub, "mul": mul, "div": div}.get(kind)
    if fn is None:
        raise ValueError(f"unknown binary op {kind!r}")
    return fn(a, b)


# ---------------------------------------------------------------------------
# reductions and shape ops

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def sum(t: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    ax = _norm_axes(axes, t.ndim)
    out = t.data.sum(axis=ax, keepdims=keepdims)
    shape = t.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(out, "sum", (t,), vjp)


def mean(t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, t.ndim)
    n = int(np.prod([t.shape[a] for a in ax])) if ax else 1
    out = t.data.mean(axis=ax, keepdims=keepdims)
    shape = t.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, shape).copy(),)

    return Tensor._result(out, "mean", (t,), vjp)


def reduce(t: Tensor, kind: str = "mean") -> Tensor:
    """Full reduction to a 0-d scalar tensor."""
    if kind == "mean":
        return mean(t)
    if kind == "sum":
        return sum(t)
    raise ValueError(f"unknown reduction {kind!r}")


def amax(t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Maximum over axes; the gradient goes to the first maximal element."""
    ax = _norm_axes(axes, t.ndim)
    keep = tuple(a for a in range(t.ndim) if a not in ax)
    perm = keep + ax
    moved = np.transpose(t.data, perm)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = np.expand_dims(out, ax)

    def vjp(g):
        g = np.asarray(g).reshape(lead)
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        return (np.transpose(gflat.reshape(moved.shape), np.argsort(perm)),)

    return Tensor._result(out, "amax", (t,), vjp)


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    old = t.shape
    return Tensor._result(t.data.reshape(tuple(shape)), "reshape", (t,), lambda g: (g.reshape(old),))


def getitem(t: Tensor, index) -> Tensor:
    out = t.data[index]
    shape = t.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out), "getitem", (t,), vjp)


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    out = np.stack([t.data for t in ts], axis=axis)
    return Tensor._result(out, "stack", ts,
                          lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


def take_flat(t: Tensor, indices: np.ndarray) -> Tensor:
    """Gather ``t.reshape(C, -1)[c, indices[..., c]]``; indices are constants.

    ``indices`` has shape ``(..., C)``; the result has the same shape.
    """
    c = t.shape[0]
    flat = t.data.reshape(c, -1)
    indices = np.asarray(indices, dtype=np.intp)
    ch = np.broadcast_to(np.arange(c), indices.shape)
    out = flat[ch, indices]
    shape = t.shape

    def vjp(g):
        full = np.zeros(flat.shape)
        np.add.at(full, (ch, indices), g)
        return (full.reshape(shape),)

    return Tensor._result(out, "take_flat", (t,), vjp)


# ---------------------------------------------------------------------------
# spatial ops on the last two axes

def pad_replicate(x: np.ndarray, p: int = 1) -> np.ndarray:
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, widths, mode="edge")


def unpad_replicate_grad(g: np.ndarray, p: int = 1) -> np.ndarray:
    """Adjoint of :func:`pad_replicate`: fold border gradients onto edge pixels."""
    rows = g[..., p:-p, :].copy()
    rows[..., 0, :] += g[..., :p, :].sum(axis=-2)
    rows[..., -1, :] += g[..., -p:, :].sum(axis=-2)
    out = rows[..., p:-p].copy()
    out[..., 0] += rows[..., :p].sum(axis=-1)
    out[..., -1] += rows[..., -p:].sum(axis=-1)
    return out


def conv2d_fixed(t: Tensor, kernel) -> Tensor:
    """Per-channel 3x3 cross-correlation with a constant kernel, replicate border."""
    k = np.asarray(kernel, dtype=np.float64)
    if k.shape != (3, 3):
        raise ShapeError(f"kernel must be 3x3, got {k.shape}")
    if t.ndim < 2 or t.shape[-1] < 3 or t.shape[-2] < 3:
        raise ShapeError(f"conv2d_fixed needs spatial extent >= 3, got {list(t.shape)}")
    h, w = t.shape[-2:]
    padded = pad_replicate(t.data)
    out = np.zeros(t.shape)
    for a in range(3):
        for b in range(3):
            if k[a, b] != 0.0:
                out += k[a, b] * padded[..., a:a + h, b:b + w]

    def vjp(g):
        gp = np.zeros(padded.shape)
        for a in range(3):
            for b in range(3):
                if k[a, b] != 0.0:
                    gp[..., a:a + h, b:b + w] += k[a, b] * g
        return (unpad_replicate_grad(gp),)

    return Tensor._result(out, "conv2d_fixed", (t,), vjp)


def separable_linear(t: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """``rows @ X @ cols.T`` applied to every trailing 2-D slice; matrices constant."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if rows.shape[1] != t.shape[-2] or cols.shape[1] != t.shape[-1]:
        raise ShapeError(f"resampling matrices {rows.shape}, {cols.shape} do not fit {list(t.shape)}")
    out = np.matmul(np.matmul(rows, t.data), cols.T)
    return Tensor._result(out, "separable_linear", (t,),
                          lambda g: (np.matmul(np.matmul(rows.T, g), cols),))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Multi-channel 3x3 stride-1 convolution with replicate padding.

    ``x`` is N x Cin x H x W, ``weight`` Cout x Cin x 3 x 3, ``bias`` Cout.
    """
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects NCHW input and OIxx3x3 weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    if weight.shape[1] != cin:
        raise ShapeError(f"weight expects {weight.shape[1]} input channels, input has {cin}")
    padded = pad_replicate(x.data).transpose(1, 0, 2, 3)  # Cin x N x (H+2) x (W+2)
    # cols rows ordered (a, b, cin) to match wmat below; one GEMM per call
    cols = np.empty((3, 3, cin, n, h, w))
    for a in range(3):
        for b in range(3):
            cols[a, b] = padded[:, :, a:a + h, b:b + w]
    cols = cols.reshape(9 * cin, n * h * w)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, 9 * cin)
    out = (wmat @ cols).reshape(cout, n, h, w)
    if bias is not None:
        out += bias.data.reshape(cout, 1, 1, 1)
    out = out.transpose(1, 0, 2, 3)
    parents: list[Tensor] = [x, weight]
    if bias is not None:
        parents.append(bias)

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * h * w)
        gw = (g2 @ cols.T).reshape(cout, 3, 3, cin).transpose(0, 3, 1, 2)
        gcols = (wmat.T @ g2).reshape(3, 3, cin, n, h, w)
        gp = np.zeros((cin, n, h + 2, w + 2))
        for a in range(3):
            for b in range(3):
                gp[:, :, a:a + h, b:b + w] += gcols[a, b]
        grads = [unpad_replicate_grad(gp).transpose(1, 0, 2, 3), gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return Tensor._result(out, "conv2d", parents, vjp)


def custom(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Register a fused op with a hand-written vector-Jacobian product.

    ``vjp(g)`` receives the output gradient and returns one array (or None)
    per input.
    """
    return Tensor._result(out, op, tuple(inputs), vjp)


# ---------------------------------------------------------------------------
# tape and backward sweep

@dataclass(frozen=True)
class Node:
    node_id: int
    op: str
    inputs: tuple[int, ...]


@dataclass
class Tape:
    """Topologically ordered record of the graph behind one scalar."""

    nodes: list[Node] = field(default_factory=list)
    tensors: list[Tensor] = field(default_factory=list)

    def is_topological(self) -> bool:
        seen: set[int] = set()
        for node in self.nodes:
            if any(i not in seen for i in node.inputs):
                return False
            seen.add(node.node_id)
        return True


def trace(root: Tensor) -> Tape:
    """Collect every differentiable tensor that ``root`` depends on, inputs first."""
    tape = Tape()
    if not root.requires_grad:
        return tape
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            tape.tensors.append(t)
            tape.nodes.append(Node(t.node_id, t.op, tuple(p.node_id for p in t.parents if p.requires_grad)))
            continue
        if t.node_id in visited:
            continue
        visited.add(t.node_id)
        stack.append((t, True))
        for p in reversed(t.parents):
            if p.requires_grad and p.node_id not in visited:
                stack.append((p, False))
    return tape


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar; returns leaf node_id -> gradient.

    Gradients are also accumulated into ``leaf.grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    tape = trace(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for t in reversed(tape.tensors):
        g = grads.pop(t.node_id, None)
        if t.is_leaf:
            leaves[t.node_id] = t
            grads[t.node_id] = g if g is not None else np.zeros(t.shape)
            continue
        if g is None:
            continue
        for p, gp in zip(t.parents, t._vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=np.float64).reshape(p.shape)
            if p.node_id in grads:
                grads[p.node_id] = grads[p.node_id] + gp
            else:
                grads[p.node_id] = gp
    result = {}
    for nid, leaf in leaves.items():
        g = grads[nid]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[nid] = Tensor(g)
    return result


def grad_of(loss: Tensor, wrt: Tensor) -> np.ndarray:
    """Gradient of ``loss`` w.r.t. one leaf, zeros if unconnected; leaves ``.grad`` untouched."""
    if not wrt.requires_grad:
        raise ValueError("gradient requested for a tensor without requires_grad")
    saved = wrt.grad
    grads = backward(loss)
    wrt.grad = saved
    g = grads.get(wrt.node_id)
    return np.zeros(wrt.shape) if g is None else g.data.copy()


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    excluded: list[int] = field(default_factory=list)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, step: float = 1e-5,
                      tolerance: float = 1e-5, indices: Sequence[int] | None = None) -> GradCheckReport:
    """Compare autodiff against central differences, elementwise.

    Relative error is ``|g_ad - g_fd| / max(1, |g_fd|)``.  Elements where a
    clamp or relu switches regime within ``step`` (the one-sided slopes
    disagree) are reported in ``excluded`` and left out of the maximum.
    ``indices`` restricts the probe to a subset of flat coordinates.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step {step} outside [1e-7, 1e-3]")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    g_ad = grad_of(f(leaf), leaf).reshape(-1)
    flat = x0.reshape(-1)
    f0 = f(Tensor(x0)).item()
    worst = 0.0
    excluded = []
    probe = range(flat.size) if indices is None else [int(i) for i in indices]
    for i in probe:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        g_fd = (fp - fm) / (2 * step)
        # kink detector: one-sided slopes disagree by far more than the
        # curvature of a smooth function would allow
        right, left = (fp - f0) / step, (f0 - fm) / step
        if abs(right - left) > 1e-2 * max(1.0, abs(g_fd)):
            excluded.append(i)
            continue
        err = abs(g_ad[i] - g_fd) / max(1.0, abs(g_fd))
        worst = max(worst, err)
    return GradCheckReport(worst, worst < tolerance, len(probe) - len(excluded), excluded)
