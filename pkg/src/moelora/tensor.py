"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the detector needs are provided. Every op records a
closure that pushes the upstream gradient to its parents; ``backward``
walks the tape once in reverse topological order and then releases it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` and an optional sub-stream path.

    Sub-streams let independent parts of the model (frozen backbone, adapters,
    head, gate noise, batch order) draw from non-overlapping sequences, so
    adding adapters never perturbs the backbone weights drawn for a seed.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    # -- basic properties -------------------------------------------------
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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis, keepdims)

    # -- differentiation --------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        The tape is released afterwards; a second call on the same loss raises.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("graph already consumed; run a new forward pass before backward()")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._consumed = True
        self._consumed = True


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(g, sb) if b.requires_grad else None,
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad / bd,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x)
    return _result(y, (a,), lambda g: (g / (1.0 + np.exp(-x)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    t = x2 * 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 * 0.044715 x^2)
        du = x2 * (3 * 0.044715 * 0.5 * _GELU_C)
        du += 0.5 * _GELU_C
        s = t * t
        np.subtract(1.0, s, out=s)
        s *= x
        s *= du
        s += 0.5
        s += 0.5 * t
        s *= g
        return (s,)

    return _result(y, (a,), backward)


# -- shape ------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, index, unique: bool = False) -> Tensor:
    """Basic or advanced indexing.

    The gradient scatters back with ``np.add.at``; pass ``unique=True`` when no
    element is selected twice to use plain assignment instead.
    """
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        if unique:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), backward)


def scatter_rows(values: Tensor, rows: np.ndarray, n: int) -> Tensor:
    """Place ``values[j]`` into row ``rows[j]`` of an ``n``-row zero matrix."""
    out = np.zeros((n,) + values.shape[1:])
    out[rows] = values.data
    return _result(out, (values,), lambda g: (g[rows],))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / n)


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes of either operand broadcast as in ``np.matmul``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
            return _unbroadcast(ga, ad.shape), gb
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.multiply.outer(ad, g) if g.ndim == 1 else ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
        # frozen operands (backbone weights, inputs) get no gradient
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


# -- normalisation / probability ---------------------------------------------
def _check_finite(x: np.ndarray, what: str) -> None:
    # a single reduction: any inf or nan makes the sum non-finite
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.sum(x)
    if not np.isfinite(total) and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite input to {what}")


def softmax(a: Tensor, axis: int = -1, mask_bias: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax along ``axis``.

    ``mask_bias`` is an optional constant added before normalisation; entries
    of ``-inf`` receive exactly zero probability.
    """
    _check_finite(a.data, "softmax")
    y = a.data - a.data.max(axis=axis, keepdims=True) if mask_bias is None else a.data + mask_bias
    if mask_bias is not None:
        y -= y.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def backward(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return _result(y, (a,), backward)


def log_softmax_nll(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of two-class log-softmax outputs."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ValueError(f"expected logits of shape (batch, 2), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for batch of {logits.shape[0]}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 (bonafide) or 1 (spoof)")
    labels = labels.astype(np.intp)
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = x.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _result(np.array(loss), (logits,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gx = g * gd
        n = x.shape[-1]
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        return (
            dx,
            _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None,
            _unbroadcast(g, beta.shape) if beta.requires_grad else None,
        )

    return _result(xhat * gd + beta.data, (a, gamma, beta), backward)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis -2 (time) of ``x[B, T, d]`` counting only ``mask[B, T]`` frames."""
    w = mask / mask.sum(axis=1, keepdims=True)
    w3 = w[:, :, None]
    return _result((x.data * w3).sum(axis=1), (x,), lambda g: (g[:, None, :] * w3,))


# -- gradient checking ------------------------------------------------------
def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and must rebuild its graph from the current
    parameter values on every call. The error for one coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``. Tensors that do not require
    gradients are skipped.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = [p for p in params if p.requires_grad]
    first = f().data.copy()
    if not np.array_equal(first, f().data):
        raise RuntimeError("grad_check requires a deterministic function (disable or fix the noise)")
    for p in params:
        p.grad = None
    f().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = float(f().data)
            flat[i] = orig - eps
            with no_grad():
                down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        p.grad = None
    return worst
