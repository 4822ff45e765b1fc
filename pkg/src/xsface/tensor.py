"""Dense tensors with reverse-mode automatic differentiation.

The engine records only the operators the backbone and the losses need.
Every operator builds its output with :func:`_record`, which stores the
parents and a backward rule mapping the output gradient to one gradient
per parent.  :func:`backward` topologically orders the recorded graph and
visits each node exactly once in reverse order.

Arithmetic runs in float32.  Inside ``with precision(np.float64):`` newly
created tensors are float64, which finite-difference checks use to replay a
forward pass at higher precision.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DegenerateInputError, InvalidCallError, InvalidConfigError, InvalidShapeError

_local = threading.local()

GELU_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype of newly created tensors."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording operations."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        dtype = default_dtype()
        arr = np.asarray(data)
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidCallError(f"item() needs a single element, got dims {self.dims}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out.op = "leaf"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class ComputeGraph:
    """Recorded operations reachable from an output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> ComputeGraph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)

    @property
    def operations(self) -> list[Tensor]:
        return [n for n in self.nodes if not n.is_leaf]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad.

    Intermediate gradients live only for the duration of the pass.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise InvalidCallError(f"backward() needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        return
    graph = ComputeGraph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and structural operators
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = np.asarray(b, dtype=a.data.dtype)
        if c.ndim:
            raise InvalidShapeError("add() with a non-tensor operand needs a scalar")
        return _record(a.data + c, (a,), lambda g: (g,), "add_scalar")
    a = _as_tensor(a)
    if a.shape == b.shape:
        return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")
    # b may repeat over the leading dims of a (e.g. a position table added to every sample)
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        lead = tuple(range(a.ndim - b.ndim))
        return _record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)), "add")
    raise InvalidShapeError(f"add() dims differ: {a.dims} vs {b.dims}")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    a = _as_tensor(a)
    if a.shape != b.shape:
        raise InvalidShapeError(f"sub() dims differ: {a.dims} vs {b.dims}")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = np.asarray(b, dtype=a.data.dtype)
        if c.ndim:
            raise InvalidShapeError("mul() with a non-tensor operand needs a scalar")
        return _record(a.data * c, (a,), lambda g: (g * c,), "scale")
    a = _as_tensor(a)
    if a.shape != b.shape:
        raise InvalidShapeError(f"mul() dims differ: {a.dims} vs {b.dims}")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,), "relu")


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))
    scale = a.data.dtype.type(1.0 / count)

    def bw(g):
        if axis is None:
            return (np.full(shape, g * scale, dtype=a.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g * scale, axis), shape).copy(),)

    return _record(np.asarray(a.data.mean(axis=axis), dtype=a.data.dtype), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise InvalidShapeError(f"cannot reshape dims {list(src)} to {list(shape)}") from exc
    return _record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inverse),), "permute")


def take(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0 (indices may repeat)."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), bw, "take")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., M, K] @ b[..., K, N]``; ``b`` may also be a plain 2-D weight."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InvalidShapeError(f"matmul() inner dims disagree: {a.dims} @ {b.dims}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise InvalidShapeError(f"matmul() batch dims disagree: {a.dims} @ {b.dims}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(ad @ bd, (a, b), bw, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (a,), bw, "softmax")


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    x = a.data
    c = x.dtype.type(GELU_SQRT_2_OVER_PI)
    k = x.dtype.type(GELU_CUBIC)
    t = np.tanh(c * (x + k * x * x * x))
    out = 0.5 * x * (1 + t)

    def bw(g):
        dt = (1 - t * t) * c * (1 + 3 * k * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)

    return _record(out.astype(x.dtype, copy=False), (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[..., D_in] @ weight[D_out, D_in]ᵀ + bias[D_out]``."""
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise InvalidShapeError(f"linear(): input dims {x.dims} incompatible with weight dims {weight.dims}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise InvalidShapeError(f"linear(): bias dims {bias.dims} != [{weight.shape[0]}]")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    lead = xd.shape[:-1]

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if bias is not None else None
        return gx.reshape(lead + (wd.shape[1],)), gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, bw, "linear")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dim (biased variance, eps inside the sqrt), then scale and shift."""
    d = x.shape[-1] if x.ndim else 0
    if gamma.shape != (d,) or beta.shape != (d,):
        raise InvalidShapeError(f"layer_norm(): gamma {gamma.dims}/beta {beta.dims} do not match last dim of {x.dims}")
    if not eps > 0:
        raise InvalidConfigError("layer_norm(): eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        dxhat = g * gamma.data
        gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bw, "layer_norm")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over ``x[N, C_in, H, W]`` (or unbatched ``[C_in, H, W]``)."""
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidShapeError(f"conv2d(): expected 4-D input and weight, got {x.dims} and {weight.dims}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise InvalidShapeError(f"conv2d(): C_in={cin} and C_out={cout} must be divisible by groups={groups}")
    if cin_g != cin // groups:
        raise InvalidShapeError(f"conv2d(): weight dim 1 is {cin_g}, expected C_in/groups={cin // groups}")
    if bias is not None and bias.shape != (cout,):
        raise InvalidShapeError(f"conv2d(): bias dims {bias.dims} != [{cout}]")
    if stride < 1 or padding < 0:
        raise InvalidShapeError(f"conv2d(): invalid stride={stride} padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise InvalidShapeError(f"conv2d(): kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cout_g = cout // groups
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    xd = x.data
    wd = weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    depthwise = cin_g == 1 and cout_g == 1

    def tap(arr, i, j):
        return arr[:, :, i:i + hspan:stride, j:j + wspan:stride]

    if depthwise:
        out = np.zeros((n, cout, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += tap(xp, i, j) * wd[None, :, 0, i, j, None, None]
        cols = None
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # rows: (n, ho, wo); columns: (c_in, kh, kw) per group
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, groups, cin_g * kh * kw)
        wmat = wd.reshape(groups, cout_g, cin_g * kh * kw)
        out = np.empty((n * ho * wo, groups, cout_g), dtype=xd.dtype)
        for g in range(groups):
            out[:, g] = cols[:, g] @ wmat[g].T
        out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def bw(gout):
        gxp = np.zeros(xp.shape, dtype=gout.dtype)
        if depthwise:
            gw = np.empty(weight.shape, dtype=gout.dtype)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = (gout * tap(xp, i, j)).sum(axis=(0, 2, 3))
                    tap(gxp, i, j)[...] += gout * wd[None, :, 0, i, j, None, None]
        else:
            g2 = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(n * ho * wo, groups, cout_g)
            gw = np.empty((groups, cout_g, cin_g * kh * kw), dtype=gout.dtype)
            gcols = np.empty(cols.shape, dtype=gout.dtype)
            for g in range(groups):
                gw[g] = g2[:, g].T @ cols[:, g]
                gcols[:, g] = g2[:, g] @ wmat[g]
            gw = gw.reshape(weight.shape)
            gcols = gcols.reshape(n, ho, wo, cin, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    tap(gxp, i, j)[...] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = gout.sum(axis=(0, 2, 3)) if bias is not None else None
        return np.ascontiguousarray(gx), gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    out_t = _record(out, parents, bw, "conv2d")
    if unbatched:
        out_t = reshape(out_t, out_t.shape[1:])
    return out_t


def multihead_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int) -> Tensor:
    """Scaled dot-product self-attention over ``x[N, T, D]``; projections are ``x @ W``."""
    if x.ndim != 3:
        raise InvalidShapeError(f"multihead_attention(): expected [N, T, D], got {x.dims}")
    n, t, d = x.shape
    if heads < 1 or d % heads:
        raise InvalidConfigError(f"multihead_attention(): D={d} not divisible by heads={heads}")
    for name, w in (("Wq", wq), ("Wk", wk), ("Wv", wv), ("Wo", wo)):
        if w.shape != (d, d):
            raise InvalidShapeError(f"multihead_attention(): {name} dims {w.dims} != [{d}, {d}]")
    dh = d // heads

    def split(z: Tensor) -> Tensor:
        return permute(reshape(z, (n, t, heads, dh)), (0, 2, 1, 3))

    q = split(matmul(x, wq))
    k = split(matmul(x, wk))
    v = split(matmul(x, wv))
    scores = mul(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = reshape(permute(matmul(attn, v), (0, 2, 1, 3)), (n, t, d))
    return matmul(ctx, wo)


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------

def _norms(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        rows = np.flatnonzero(norms.reshape(-1) == 0).tolist()
        raise DegenerateInputError(f"{what}: zero-norm vector at row(s) {rows}")
    return norms


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two ``[D]`` vectors (scalar) or row-wise over ``[N, D]`` (shape ``[N]``)."""
    if a.shape != b.shape or a.ndim not in (1, 2):
        raise InvalidShapeError(f"cosine_similarity(): dims {a.dims} and {b.dims} must match and be [D] or [N, D]")
    ad, bd = a.data, b.data
    na = _norms(ad, "cosine_similarity(a)")
    nb = _norms(bd, "cosine_similarity(b)")
    dot = (ad * bd).sum(axis=-1, keepdims=True)
    cos = dot / (na * nb)

    def bw(g):
        g = np.expand_dims(g, -1)
        ga = g * (bd / (na * nb) - cos * ad / (na * na))
        gb = g * (ad / (na * nb) - cos * bd / (nb * nb))
        return ga, gb

    return _record(cos[..., 0], (a, b), bw, "cosine_similarity")


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row (last dim) to unit Euclidean norm."""
    xd = x.data
    norms = _norms(xd, "l2_normalize")
    y = xd / norms

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,)

    return _record(y, (x,), bw, "l2_normalize")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits[N, C]`` against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidShapeError(f"cross_entropy(): logits {logits.dims} vs labels {list(labels.shape)}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _record(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw, "cross_entropy")
