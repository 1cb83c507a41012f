"""A small dense-tensor engine with reverse-mode gradients.

Every result tensor remembers its parents and a closure producing the
vector-Jacobian product.  Each tensor also gets a monotonically increasing
sequence number at creation, so the recorded graph is simply "all tensors
reachable from the output, ordered by creation"; ``backward`` walks that order
in reverse.

Shapes must match exactly for elementwise ops.  The only broadcasting site is
the explicit :func:`broadcast` op.  Python numbers are accepted as constants.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteInput, ShapeMismatch

_sequence = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._seq = next(_sequence)

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        # constants-only results stay leaves, which keeps the graph small
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._op = op
        out._seq = next(_sequence)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Intermediate gradients live only for the duration of the call, so calling
        ``backward`` twice adds the same contribution twice to the leaves.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeMismatch(f"seed gradient shape {grad.shape} != output shape {self.shape}")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(t._parents)

        pending: dict[int, np.ndarray] = {id(self): grad}
        for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            if not t._parents:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, scalar_pow(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return scalar_pow(self, p)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Register a custom differentiable op; ``backward(g)`` returns one array (or None) per parent."""
    return Tensor._result(np.asarray(data, dtype=np.float64), parents, backward, op)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ (use broadcast explicitly)")


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def add(a: Tensor, b) -> Tensor:
    if _is_number(b):
        return make_op(a.data + b, (a,), lambda g: (g,), "add_const")
    b = as_tensor(b)
    _same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if _is_number(b):
        return make_op(a.data - b, (a,), lambda g: (g,), "sub_const")
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if _is_number(b):
        b = float(b)
        return make_op(a.data * b, (a,), lambda g: (g * b,), "scale")
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scalar_pow(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    return make_op(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "scalar_pow")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got {a.shape}")
    return make_op(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def broadcast(a: Tensor, shape) -> Tensor:
    """Numpy-style broadcast; the backward pass sums over the expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeMismatch(f"broadcast: {a.shape} -> {shape}: {exc}") from exc
    src = a.shape
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(src),)

    return make_op(out, (a,), backward, "broadcast")


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    axes = _norm_axes(axis, a.data.ndim)
    src = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), src).copy(),)

    return make_op(a.data.sum(axis=axes), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    src = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), src) / count,)

    return make_op(a.data.mean(axis=axes), (a,), backward, "mean")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteInput("softmax input contains non-finite values")
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_op(s, (a,), backward, "softmax")


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1.

    x: Cin x H x W, w: Cout x Cin x 3 x 3, b: Cout.
    """
    if x.data.ndim != 3 or w.data.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"conv2d_3x3: input {x.shape} incompatible with kernel {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d_3x3: bias {b.shape} does not match {w.shape[0]} output channels")
    cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    # cols[c, ky, kx, i, j] = xp[c, i + ky, j + kx]
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(0, 3, 4, 1, 2).reshape(cin * 9, h * wd)
    wm = w.data.reshape(cout, cin * 9)
    out = wm @ cols
    if b is not None:
        out = out + b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gm = g.reshape(cout, h * wd)
        dw = (gm @ cols.T).reshape(w.shape)
        dcols = (wm.T @ gm).reshape(cin, 3, 3, h, wd)
        dxp = np.zeros((cin, h + 2, wd + 2))
        for ky in range(3):
            for kx in range(3):
                dxp[:, ky:ky + h, kx:kx + wd] += dcols[:, ky, kx]
        dx = dxp[:, 1:-1, 1:-1]
        if b is None:
            return dx, dw
        return dx, dw, gm.sum(axis=1)

    return make_op(out.reshape(cout, h, wd), parents, backward, "conv2d_3x3")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling; trailing rows/columns that do not fill a window are dropped."""
    if x.data.ndim != 3:
        raise ShapeMismatch(f"avg_pool2d expects C x H x W, got {x.shape}")
    c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeMismatch(f"avg_pool2d: {x.shape} too small for window {k}")
    crop = x.data[:, :ho * k, :wo * k]
    out = crop.reshape(c, ho, k, wo, k).mean(axis=(2, 4))

    def backward(g):
        dx = np.zeros((c, h, w))
        dx[:, :ho * k, :wo * k] = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        return (dx,)

    return make_op(out, (x,), backward, "avg_pool2d")


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two R x K matrices.

    A row with zero norm on either side yields cosine 0 and no gradient.
    """
    b = as_tensor(b)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"cosine_rows expects matrices, got {a.shape}")
    _same_shape(a, b, "cosine_rows")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=1))
    nb = np.sqrt((bd * bd).sum(axis=1))
    ok = (na > 0) & (nb > 0)
    safe_na = np.where(ok, na, 1.0)
    safe_nb = np.where(ok, nb, 1.0)
    dot = (ad * bd).sum(axis=1)
    cos = np.where(ok, dot / (safe_na * safe_nb), 0.0)

    def backward(g):
        gg = np.where(ok, g, 0.0)[:, None]
        da = gg * (bd / (safe_na * safe_nb)[:, None] - cos[:, None] * ad / (safe_na**2)[:, None])
        db = gg * (ad / (safe_na * safe_nb)[:, None] - cos[:, None] * bd / (safe_nb**2)[:, None])
        return da, db

    return make_op(cos, (a, b), backward, "cosine_rows")


def l2_norm(a: Tensor) -> Tensor:
    """Frobenius norm of the whole tensor."""
    ad = a.data
    n = float(np.sqrt((ad * ad).sum()))

    def backward(g):
        if n == 0.0:
            return (np.zeros_like(ad),)
        return (g * ad / n,)

    return make_op(np.array(n), (a,), backward, "l2_norm")


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_pow": scalar_pow,
    "matmul": matmul,
    "transpose": transpose,
    "conv2d_3x3": conv2d_3x3,
    "avg_pool2d": avg_pool2d,
    "softmax": softmax,
    "relu": relu,
    "mean": mean,
    "sum": sum,
    "reshape": reshape,
    "broadcast": broadcast,
    "cosine_rows": cosine_rows,
    "l2_norm": l2_norm,
}


def zero_grad(params) -> None:
    for p in (params.values() if isinstance(params, dict) else params):
        p.grad = None


@dataclass
class GradCheckReport:
    op: str
    max_rel_err: list[float]
    tolerance: float
    epsilon: float
    checked: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_err)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err, default=0.0)


def grad_check(op, inputs: Sequence[Tensor], epsilon: float = 1e-5, tolerance: float = 1e-5,
               seed: int = 0, max_coords: int | None = None, **kwargs) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    The op output is reduced to a scalar with fixed random weights so that
    directions like softmax's all-ones vector are not invisible. Only inputs with
    ``requires_grad`` are checked. ``max_coords`` samples that many coordinates
    per input (all coordinates when None).
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    if isinstance(op, str):
        name, fn = op, OPS[op]
    else:
        name, fn = getattr(op, "__name__", "op"), op
    rng = np.random.default_rng(seed)
    out = fn(*inputs, **kwargs)
    weights = rng.standard_normal(out.shape)

    def scalar() -> float:
        return float((fn(*inputs, **kwargs).data * weights).sum())

    targets = [t for t in inputs if isinstance(t, Tensor) and t.requires_grad]
    for t in targets:
        t.data = np.ascontiguousarray(t.data)
    saved = [t.grad for t in targets]
    for t in targets:
        t.grad = None
    sum(mul(out, Tensor(weights))).backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad for t in targets]
    for t, g in zip(targets, saved):
        t.grad = g

    errs, checked = [], []
    for t, a in zip(targets, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n)
        if max_coords is not None and n > max_coords:
            idx = np.sort(rng.choice(n, size=max_coords, replace=False))
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = scalar()
            flat[i] = orig - epsilon
            fm = scalar()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * epsilon)
        an = a.reshape(-1)[idx]
        scale = max(np.abs(an).max(initial=0.0), np.abs(num).max(initial=0.0))
        diff = np.abs(an - num).max(initial=0.0)
        errs.append(0.0 if scale == 0.0 else diff / max(scale, 1e-8))
        checked.append(int(idx.size))
    return GradCheckReport(name, errs, tolerance, epsilon, checked)


def params_to_json(params: dict[str, Tensor]) -> dict:
    return {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()} for k, v in params.items()}


def params_from_json(d: dict) -> dict[str, Tensor]:
    out = {}
    for k, v in d.items():
        data = np.asarray(v["data"], dtype=np.float64).reshape(tuple(v["shape"]))
        out[k] = Tensor(data, requires_grad=True)
    return out


def params_digest(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()
