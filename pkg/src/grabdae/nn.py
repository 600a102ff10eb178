"""Small reverse-mode autodiff engine on top of numpy.

Tensors store float32 by default (float64 is kept if given, which the
gradient checks use). Each op records its parents and a backward rule on
the output tensor; :func:`backward` walks the recorded graph in reverse
topological order exactly once and then releases it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class UsageError(RuntimeError):
    """Raised when the tape lifecycle is violated (e.g. double backward)."""


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 and isinstance(data, np.ndarray):
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _result_dtype(*ts: Tensor):
    return np.result_type(*[t.data.dtype for t in ts])


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result; record the backward rule only if a parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _lift(a)
    if not isinstance(b, Tensor):
        c = float(b)
        out = (a.data * c).astype(a.data.dtype, copy=False)
        return _make(out, (a,), lambda g: (g * c,))
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw)


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)
    return _make(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.data.dtype),))


def tensor_mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.sum(dtype=np.float64) / n, dtype=x.data.dtype)
    return _make(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).astype(x.data.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(out, tensors, bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)
    return _make(out, (x,), lambda g: (g * mask,))


def gradient_reversal(x: Tensor, lam: float) -> Tensor:
    """Identity on the forward pass; scales the incoming gradient by ``-lam``.

    Training uses ``lam >= 0``; negative values are accepted so that
    ``lam = -1`` gives a plain identity for finite-difference checks.
    """
    if not np.isfinite(lam):
        raise ValueError(f"gradient reversal lambda must be finite, got {lam}")
    c = -float(lam)
    return _make(x.data, (x,), lambda g: (g * c,))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = rng.random(x.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    m = keep * scale
    return _make(x.data * m, (x,), lambda g: (g * m,))


# ---------------------------------------------------------------------------
# layers

def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` for x of shape [N, d_in] and W of shape [d_in, d_out]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: x {x.shape} incompatible with W {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match W {W.shape}")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def bw(g):
        gx = g @ W.data.T if x.requires_grad else None
        gW = x.data.T @ g if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g.sum(axis=0, dtype=np.float64).astype(b.data.dtype)

    return _make(out, parents, bw)


def _conv_windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with square FxCxkxk kernels."""
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernels, got {x.shape} and {kernels.shape}")
    N, C, H, W = x.shape
    F, Ck, k, k2 = kernels.shape
    if Ck != C or k != k2:
        raise DimensionError(f"conv2d: kernels {kernels.shape} incompatible with input {x.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    if H + 2 * pad < k or W + 2 * pad < k:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {(H + 2 * pad, W + 2 * pad)}")
    if bias is not None and bias.shape != (F,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {F} filters")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = _conv_windows(xp, k, stride)  # N, C, Ho, Wo, k, k
    Ho, Wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * k * k)
    kflat = kernels.data.reshape(F, -1)
    out = cols @ kflat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2))
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, F)
        gk = (gflat.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gflat @ kflat).reshape(N, Ho, Wo, C, k, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        if bias is None:
            return gx, gk
        return gx, gk, gflat.sum(axis=0, dtype=np.float64).astype(bias.data.dtype)

    return _make(out, parents, bw)


def mean_pool2d(x: Tensor, size: int = 2) -> Tensor:
    N, C, H, W = x.shape
    if H % size or W % size:
        raise DimensionError(f"mean_pool2d: extents {(H, W)} not divisible by {size}")
    out = x.data.reshape(N, C, H // size, size, W // size, size).mean(axis=(3, 5), dtype=np.float64)
    out = out.astype(x.data.dtype)
    inv = 1.0 / (size * size)

    def bw(g):
        gx = np.repeat(np.repeat(g * inv, size, axis=2), size, axis=3)
        return (gx.astype(x.data.dtype, copy=False),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# softmax & losses

def _log_softmax(z: np.ndarray) -> np.ndarray:
    z64 = z.astype(np.float64)
    shifted = z64 - z64.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    p64 = np.exp(_log_softmax(logits.data))
    p = p64.astype(logits.data.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        inner = (g64 * p64).sum(axis=1, keepdims=True)
        return ((p64 * (g64 - inner)).astype(logits.data.dtype),)

    return _make(p, (logits,), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be [N, K], got {logits.shape}")
    N, K = logits.shape
    if N < 1 or labels.shape[0] != N:
        raise DimensionError(f"{labels.shape[0]} labels for {N} logit rows")
    if labels.min() < 0 or labels.max() >= K:
        raise IndexError(f"label out of range [0, {K}): {labels.min()}..{labels.max()}")
    logp = _log_softmax(logits.data)
    rows = np.arange(N)
    loss = -logp[rows, labels].mean()
    out = np.asarray(loss, dtype=logits.data.dtype)

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return ((d * (float(g) / N)).astype(logits.data.dtype),)

    return _make(out, (logits,), bw)


def mse_loss(target: Tensor, pred: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if target.shape != pred.shape:
        raise DimensionError(f"mse_loss: extents differ {target.shape} vs {pred.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.data.dtype)

    def bw(g):
        gp = (2.0 * float(g) / n) * diff
        return (-gp).astype(target.data.dtype), gp.astype(pred.data.dtype)

    return _make(out, (target, pred), bw)


def outer_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise outer product [N, d] x [N, K] -> [N, d*K], laid out K-major.

    Block ``k`` of each output row is ``a_row * b_row[k]``.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"outer_rows: extents {a.shape} and {b.shape} do not pair")
    N, d = a.shape
    K = b.shape[1]
    out = (b.data[:, :, None] * a.data[:, None, :]).reshape(N, K * d)

    def bw(g):
        g3 = g.reshape(N, K, d)
        ga = np.einsum("nkd,nk->nd", g3, b.data)
        gb = np.einsum("nkd,nd->nk", g3, a.data)
        return ga, gb

    return _make(out, (a, b), bw)


# ---------------------------------------------------------------------------
# tape

def tape_of(loss: Tensor) -> list[Tensor]:
    """Recorded operations reachable from ``loss`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires grad, then free the tape."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("backward already ran on this tape")
    order = tape_of(loss)
    for node in order:
        if node._consumed:
            raise UsageError("tape shares nodes with an already consumed backward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if not node.is_leaf:
            node._consumed = True
            node._parents = ()
            node._backward = None
    loss._consumed = True


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


def sgd_update(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState) -> None:
    """In-place SGD with momentum and L2 weight decay.

    ``v <- momentum*v + grad + weight_decay*param``; ``param <- param - lr*v``.
    A missing gradient counts as zero.
    """
    for p, g in zip(params, grads):
        v = state.velocity.get(id(p))
        if v is None:
            raise StateError(f"no velocity buffer registered for parameter {p.name or id(p)}")
        if g is None:
            g = np.zeros_like(p.data)
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p.data
        p.data -= state.lr * v


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, momentum=momentum, weight_decay=weight_decay)
        for p in self.params:
            self.state.velocity[id(p)] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_update(self.params, [p.grad for p in self.params], self.state)


# ---------------------------------------------------------------------------
# init helpers

def kaiming_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def parameter(data: np.ndarray, name: str) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)
