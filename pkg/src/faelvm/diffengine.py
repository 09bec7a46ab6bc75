"""Small reverse-mode automatic differentiation engine over float64 numpy arrays.

Every differentiable operation is a plain function that takes :class:`Tensor`
inputs and records a node on the tape shared by its inputs. Calling
:func:`backward` walks that tape in reverse creation order, which is a valid
topological order because nodes can only consume tensors that already exist.

Broadcasting is deliberately restricted: elementwise binary operations accept
two tensors of identical shape, or a tensor and a scalar. Anything else has to
go through :func:`broadcast_to` so that every shape change is visible.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, InvalidValueError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "backward",
    "adam_step",
    "affine",
    "matmul",
    "conv1d",
    "exp",
    "log",
    "softplus",
    "sigmoid",
    "tanh",
    "square",
    "sqrt",
    "wrap_angle",
    "wrap_diff",
    "atan2",
    "softmax",
    "l2_normalize",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "where_const",
]


class Tensor:
    """A float64 array, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "tape", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, tape: "Tape | None" = None, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Records operations in creation order and owns the parameter registry."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = Tensor(np.array(value, dtype=np.float64, copy=True), self, True, name)
        self.params[name] = t
        return t

    def params_from(self, arrays: dict[str, np.ndarray], trainable: Iterable[str] | None = None) -> dict[str, Tensor]:
        """Register ``arrays`` as parameters; names outside ``trainable`` become constants."""
        keep = set(arrays) if trainable is None else set(trainable)
        out = {}
        for k, v in arrays.items():
            out[k] = self.param(k, v) if k in keep else Tensor(v)
        return out

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs: Sequence[Tensor]) -> "Tape | None":
    tape = None
    for t in inputs:
        if t.requires_grad:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ContractError("inputs belong to different tapes")
    return tape


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(data)
    out = Tensor(data, tape, True)
    tape.nodes.append(_Node(out, inputs, vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to every registered parameter.

    Parameters that do not influence ``loss`` receive zero gradients.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise InvalidValueError("loss is not finite")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for name, p in tape.params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
    return out


# -- elementwise binary ---------------------------------------------------------------


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"elementwise operands have shapes {a.shape} and {b.shape}; use broadcast_to")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        # constants (observed data, masks) skip the full-size product
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if np.any(b.data == 0):
        raise InvalidValueError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), vjp)


# -- pointwise ------------------------------------------------------------------------


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise InvalidValueError("log of non-positive value")
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xd = np.atleast_1d(x.data)
    out = (np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))).reshape(x.shape)
    s = _sigmoid(xd).reshape(x.shape)
    return _record(out, (x,), lambda g: (g * s,))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x: Tensor) -> Tensor:
    """Square root with zero subgradient at 0 (used for distances)."""
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise InvalidValueError("sqrt of negative value")
    out = np.sqrt(x.data)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _record(out, (x,), vjp)


TWO_PI = 2.0 * np.pi


def wrap_angle(x: Tensor) -> Tensor:
    """Reduce into [0, 2*pi); derivative is 1 away from the cut."""
    x = _as_tensor(x)
    out = np.mod(x.data, TWO_PI)
    out[out >= TWO_PI] = 0.0
    return _record(out, (x,), lambda g: (g,))


def _wrap_offset(d: np.ndarray) -> np.ndarray:
    # floor-based mod, about twice as fast as np.mod on large arrays
    out = d + np.pi
    out -= TWO_PI * np.floor(out * (1.0 / TWO_PI))
    out -= np.pi
    return out


def wrap_diff(x: Tensor) -> Tensor:
    """Signed shortest angular offset in [-pi, pi); derivative is 1."""
    x = _as_tensor(x)
    return _record(_wrap_offset(x.data), (x,), lambda g: (g,))


def atan2(y: Tensor, x: Tensor) -> Tensor:
    y, x = _binary_operands(y, x)
    yd, xd = y.data, x.data
    r2 = xd * xd + yd * yd
    if np.any(r2 == 0):
        raise InvalidValueError("atan2 of zero vector")
    out = np.arctan2(yd, xd)
    return _record(out, (y, x), lambda g: (_unbroadcast(g * xd / r2, y.shape), _unbroadcast(-g * yd / r2, x.shape)))


def where_const(mask: np.ndarray, x: Tensor, value: float) -> Tensor:
    """Replace entries of ``x`` outside ``mask`` by a constant."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} != tensor shape {x.shape}")
    out = np.where(mask, x.data, value)
    return _record(out, (x,), lambda g: (np.where(mask, g, 0.0),))


# -- row operations -------------------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), vjp)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each row (last axis) to unit norm; norms are floored at ``eps``."""
    x = _as_tensor(x)
    xd = x.data
    raw = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    n = np.maximum(raw, eps)
    out = xd / n
    active = raw > eps

    def vjp(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return ((g - np.where(active, out * proj, 0.0)) / n,)

    return _record(out, (x,), vjp)


# -- reductions and shape ops ---------------------------------------------------------


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    out = x.data.sum(axis=axis)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _record(np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    x = _as_tensor(x)
    shape = tuple(shape)
    if x.ndim != len(shape):
        raise ShapeError(f"broadcast_to needs equal rank, got {x.shape} -> {shape}")
    for a, b in zip(x.shape, shape):
        if a != b and a != 1:
            raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a != b)
    old = x.shape
    return _record(np.broadcast_to(x.data, shape), (x,), lambda g: (g.sum(axis=axes, keepdims=True).reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    x = _as_tensor(x)
    out = x.data[index]
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out), (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(_as_tensor(x) for x in xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _record(out, xs, vjp)


# -- linear layers --------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for x of shape (rows, in), w (in, out), b (out,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine shapes x={x.shape} w={w.shape} b={b.shape}")
    xd, wd = x.data, w.data
    return _record(xd @ wd + b.data, (x, w, b), lambda g: (g @ wd.T if x.requires_grad else None, xd.T @ g, g.sum(axis=0)))


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, groups: int = 1) -> Tensor:
    """Grouped 1-D convolution along time, stride 1, zero 'same' padding.

    Shapes: x (T, C_in), kernels (C_out, C_in // groups, K) with K odd,
    bias (C_out,). Output (T, C_out). Kernels are applied as cross-correlation,
    so kernel tap ``K // 2`` multiplies the aligned time bin.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.ndim != 2 or kernels.ndim != 3:
        raise ShapeError(f"conv1d shapes x={x.shape} kernels={kernels.shape}")
    T, c_in = x.shape
    c_out, c_per, K = kernels.shape
    if K % 2 != 1:
        raise ShapeError("kernel size must be odd")
    if c_in % groups or c_out % groups or c_per != c_in // groups:
        raise ShapeError(f"channels {c_in}->{c_out} incompatible with groups={groups}")
    o_per = c_out // groups
    pad = K // 2
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=0)  # (T, C_in, K)
    win_g = win.reshape(T, groups, c_per, K)
    w_g = kernels.data.reshape(groups, o_per, c_per, K)
    out = np.einsum("tgck,gock->tgo", win_g, w_g, optimize=True).reshape(T, c_out)
    inputs = (x, kernels)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data
        inputs = (x, kernels, bias)

    def vjp(g):
        g_g = g.reshape(T, groups, o_per)
        gw = np.einsum("tgo,tgck->gock", g_g, win_g, optimize=True).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gwin = np.einsum("tgo,gock->tgck", g_g, w_g, optimize=True).reshape(T, c_in, K)
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[k : k + T] += gwin[:, :, k]
            gx = gxp[pad : pad + T]
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=0),)
        return grads

    return _record(out, inputs, vjp)


# -- fused kernels ------------------------------------------------------------------


def pairwise_sq_dist(z_cols: Sequence[Tensor], centers: Tensor, circular: Sequence[bool]) -> Tensor:
    """Squared distances between latent points and centers, shape (..., N, T).

    ``z_cols`` holds one (..., T) tensor per factor and ``centers`` is (N, D).
    Circular factors use the shortest signed angular offset. One tape node
    replaces the broadcast/subtract/wrap/square chain.
    """
    z_cols = [_as_tensor(z) for z in z_cols]
    centers = _as_tensor(centers)
    if centers.ndim != 2 or centers.shape[1] != len(z_cols) or len(circular) != len(z_cols):
        raise ShapeError(f"centers {centers.shape} do not match {len(z_cols)} latent factors")
    lead = z_cols[0].shape[:-1]
    offsets = []
    d2 = None
    for f, z in enumerate(z_cols):
        if z.shape[:-1] != lead:
            raise ShapeError("latent factors have different shapes")
        delta = z.data[..., None, :] - centers.data[:, f][:, None]
        if circular[f]:
            delta = _wrap_offset(delta)
        offsets.append(delta)
        d2 = delta * delta if d2 is None else d2 + delta * delta

    def vjp(g):
        out = []
        g2 = 2.0 * g
        gc = np.empty(centers.shape)
        for f, z in enumerate(z_cols):
            gd = g2 * offsets[f]
            out.append(gd.sum(axis=-2) if z.requires_grad else None)
            gc[:, f] = -gd.sum(axis=tuple(i for i in range(gd.ndim) if i != gd.ndim - 2))
        return (*out, gc if centers.requires_grad else None)

    return _record(d2, (*z_cols, centers), vjp)


def poisson_loss(rates: Tensor, counts: np.ndarray, partial_axes: tuple[int, ...] | None = None):
    """``sum(rates - counts * log(rates))`` as a single node (no log-factorial term).

    With ``partial_axes`` the partial sums over those axes are returned too, as
    a plain array alongside the scalar loss.
    """
    rates = _as_tensor(rates)
    y = np.asarray(counts, dtype=np.float64)
    if y.shape != rates.shape:
        raise ShapeError(f"counts {y.shape} vs rates {rates.shape}")
    r = rates.data
    if np.any(r <= 0):
        raise InvalidValueError("log of non-positive rate")
    terms = r - y * np.log(r)
    loss = _record(np.asarray(terms.sum()), (rates,), lambda g: (g * (1.0 - y / r),))
    if partial_axes is None:
        return loss
    return loss, terms.sum(axis=partial_axes)


# -- Adam -----------------------------------------------------------------------------


class AdamState:
    """Bias-corrected Adam moments for a dict of named parameter arrays."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Return updated copies of ``params``; names absent from ``grads`` pass through."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    out = dict(params)
    for k, g in grads.items():
        p = params[k]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        out[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out
