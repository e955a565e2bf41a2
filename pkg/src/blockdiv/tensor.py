"""Dense float64 tensors with reverse-mode automatic differentiation.

Values wrap an immutable numpy array. Every operation returns a new
``Tensor``; when any input requires a gradient the result records its
parents and a closure mapping the upstream gradient to per-parent
gradients. ``backward`` walks the graph in reverse topological order and
returns a mapping from leaf tensors to gradient arrays, so gradients are
never written onto the tensors themselves.

Broadcasting is deliberately restricted: binary element-wise ops accept
equal shapes or a scalar on either side. Anything else has to go through
``broadcast_to`` so that shape mistakes surface as errors.
"""

from __future__ import annotations

import copy
import json
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, index) -> Tensor:
        return getitem(self, index)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes if axes else None)

    def sum(self, axis=None) -> Tensor:
        return sum_(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=DTYPE)
    _check_finite(data, op)
    data.setflags(write=False)
    out.data = data
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} differ")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    return grad


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, "div", (a, b),
                 lambda g: (_reduce_to(g / bd, ad.shape),
                            _reduce_to(-g * out / bd, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    if (a.data < 0).any():
        raise NonFiniteError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), "abs", (a,), lambda g: (g * np.sign(ad),))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    ad = a.data
    keep = ad > lo
    return _make(np.where(keep, ad, lo), "clamp_min", (a,), lambda g: (g * keep,))


# ------------------------------------------------------------- activations


def silu(a: Tensor) -> Tensor:
    ad = a.data
    sig = 1.0 / (1.0 + np.exp(-ad))
    return _make(ad * sig, "silu", (a,),
                 lambda g: (g * (sig * (1.0 + ad * (1.0 - sig))),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    ad = a.data
    sq = ad * ad
    th = np.tanh(_GELU_C * (ad + 0.044715 * sq * ad))

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * sq)
        return (g * (0.5 * (1.0 + th) + 0.5 * ad * (1.0 - th * th) * dinner),)

    return _make(0.5 * ad * (1.0 + th), "gelu", (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, "softmax", (a,), backward)


# --------------------------------------------------------------- reductions


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(np.reshape(g, kept), shape),)

    return _make(a.data.sum(axis=axes), "sum", (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return scale(sum_(a, axes), 1.0 / count)


def max_(a: Tensor, axis: int = -1) -> Tensor:
    """Maximum along one axis; the gradient goes to the first arg-max."""
    ax = axis % a.ndim
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        np.put_along_axis(grad, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (grad,)

    return _make(np.squeeze(out, ax), "max", (a,), backward)


# -------------------------------------------------------------------- shape


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(tuple(shape))
    return _make(out, "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-rule broadcast; the gradient is summed back."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {list(src)} to {list(shape)}") from exc
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1)

    def backward(g):
        return (g.sum(axis=axes, keepdims=True).reshape(src),)

    return _make(np.array(out), "broadcast_to", (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError("concat: incompatible shapes "
                             + ", ".join(str(list(t.shape)) for t in tensors))
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), "concat",
                 tensors, backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None
               for i in items)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(index)

    def backward(g):
        grad = np.zeros(shape)
        if basic:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _make(np.array(a.data[index]), "getitem", (a,), backward)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of a 2-D table selected by integer ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("take_rows expects a 2-D table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, ids, g)
        return (grad,)

    return _make(table.data[ids], "take_rows", (table,), backward)


# ------------------------------------------------------------------- linalg


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supports ``[m,k] @ [k,n]``, ``[...,k] @ [k,n]`` (shared weight) and
    batched ``[...,m,k] @ [...,k,n]`` with identical leading extents.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul: unsupported ranks {a.ndim}, {b.ndim}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {list(a.shape)} @ {list(b.shape)}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, n = bd.shape
        lead = ad.shape[:-1]
        out = (ad.reshape(-1, k) @ bd).reshape(lead + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(lead + (k,))
            gb = ad.reshape(-1, k).T @ g2
            return ga, gb
    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch extents differ, {list(a.shape)} @ {list(b.shape)}")
        out = ad @ bd

        def backward(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(out, "matmul", (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with the bias broadcast over leading axes."""
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {list(bias.shape)} vs weight {list(weight.shape)}")
    xd, wd = x.data, weight.data
    k, n = wd.shape
    if xd.shape[-1] != k:
        raise ShapeError(f"linear: inner extents differ, {list(x.shape)} @ {list(weight.shape)}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, k)
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (n,))

    def backward(g):
        g2 = g.reshape(-1, n)
        grads = [(g2 @ wd.T).reshape(lead + (k,)), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "linear", parents, backward)


# ------------------------------------------------------------ normalization


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-6) -> Tensor:
    """Standardize the last axis with the population variance, then affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    for p in (gain, bias):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: affine shape {list(p.shape)} vs last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx_hat = g * gain.data if gain is not None else g
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        flat = g.reshape(-1, d)
        if gain is not None:
            grads.append((flat * xhat.reshape(-1, d)).sum(axis=0))
        if bias is not None:
            grads.append(flat.sum(axis=0))
        return grads

    parents = tuple(p for p in (x, gain, bias) if p is not None)
    return _make(out, "layer_norm", parents, backward)


def l2_normalize(x: Tensor, eps: float = 1e-8, axis: int = -1) -> Tensor:
    """Divide each vector along ``axis`` by ``max(||v||_2, eps)``.

    A zero vector maps to a zero vector.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    active = norm > eps
    denom = np.where(active, norm, eps)
    out = xd / denom

    def backward(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return ((g - np.where(active, out * proj, 0.0)) / denom,)

    return _make(out, "l2_normalize", (x,), backward)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity over the last axis (eps-guarded norms)."""
    _binary_shapes(a, b, "cosine_similarity")
    return sum_(mul(l2_normalize(a, eps), l2_normalize(b, eps)), -1)


# ----------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar ``root``.

    Returns a dict keyed by every grad-enabled leaf reachable from ``root``.
    """
    if root.size != 1 or root.ndim != 0:
        raise ShapeError(f"backward needs a scalar root, got shape {list(root.shape)}")
    grads: dict[int, np.ndarray] = {id(root): np.ones(())}
    leaves: dict[Tensor, np.ndarray] = {}
    if not root.requires_grad:
        return leaves
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = _check_finite(np.asarray(g, dtype=DTYPE), "backward")
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` w.r.t. each tensor in ``wrt`` (zeros if unreachable)."""
    table = backward(root)
    return [np.asarray(table.get(t, np.zeros(t.shape))) for t in wrt]


# ---------------------------------------------------------------------- rng


class Rng:
    """Seeded PCG64 stream (numpy ``Generator``) with a portable hex state."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def spawn(self, index: int) -> Rng:
        """Independent child stream keyed by ``(seed, index)``."""
        ss = np.random.SeedSequence([self.seed, int(index)])
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child

    def copy(self) -> Rng:
        clone = Rng.__new__(Rng)
        clone.seed = self.seed
        clone._gen = copy.deepcopy(self._gen)
        return clone

    def state_hex(self) -> str:
        st = self._gen.bit_generator.state
        payload = {"seed": self.seed, "state": st["state"]["state"], "inc": st["state"]["inc"],
                   "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}
        return json.dumps(payload, sort_keys=True).encode().hex()

    @classmethod
    def from_hex(cls, text: str) -> Rng:
        payload = json.loads(bytes.fromhex(text).decode())
        rng = cls(payload["seed"])
        rng._gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": payload["state"], "inc": payload["inc"]},
            "has_uint32": payload["has_uint32"],
            "uinteger": payload["uinteger"],
        }
        return rng
