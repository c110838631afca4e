"""Small reverse-mode autodiff engine on top of numpy.

Everything is float64. A ``Tensor`` records the op that produced it as a
tuple of parents plus a closure mapping the upstream gradient to one gradient
per parent. ``backward`` walks the graph in reverse topological order and
accumulates into ``.grad`` of the leaves that require gradients; callers zero
those explicitly (see ``zero_grad``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_FILL = -1e9


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return out


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(_check(data, op))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _make(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,), "relu")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"relu": relu}


def tsum(x: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / count)


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _make(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
        "transpose",
    )


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` along the first axis."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), backward, "take_rows")


def put_rows(x: Tensor, index, n_rows: int) -> Tensor:
    """Scatter the rows of ``x`` into a zero array with ``n_rows`` rows.

    ``index`` must not contain duplicates.
    """
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n_rows,) + x.shape[1:])
    out[index] = x.data
    return _make(out, (x,), lambda g: (g[index],), "put_rows")


def stack_rows(xs: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors into a 2-D tensor."""
    return concat([reshape(as_tensor(x), (1, -1)) for x in xs], axis=0)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------- normalization


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm parameter shape mismatch for input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def l2_normalize(x: Tensor) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("cannot normalize a zero-norm row")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make(y, (x,), backward, "l2_normalize")


def _sequential_sum_last(a: np.ndarray) -> np.ndarray:
    # Left-to-right accumulation, so trailing exact zeros (masked slots)
    # never change the result bit pattern.
    acc = a[..., 0].copy()
    for j in range(1, a.shape[-1]):
        acc += a[..., j]
    return acc


def masked_softmax(logits: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` is True where a slot is blocked.

    ``mask`` broadcasts against ``logits``. Blocked slots get exactly zero
    probability.
    """
    z = logits.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if np.any(np.all(np.broadcast_to(mask, z.shape), axis=-1)):
            raise ValueError("masked_softmax: a row has every position masked")
        z = np.where(mask, MASK_FILL, z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    if mask is not None:
        e = np.where(mask, 0.0, e)
    p = e / _sequential_sum_last(e)[..., None]

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (logits,), backward, "masked_softmax")


# ---------------------------------------------------------------- attention


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask=None) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over ``(..., T, dh)`` tensors.

    ``key_mask`` has shape ``(..., T)`` (broadcast over queries and heads by
    the caller) with True marking padded keys. Returns the output and the
    attention probabilities. Token-axis contractions are accumulated
    sequentially so that padding never alters the bits of real outputs.
    """
    dh = q.shape[-1]
    scale = 1.0 / np.sqrt(dh)
    logits_data = (q.data[..., :, None, :] * k.data[..., None, :, :]).sum(axis=-1) * scale
    logits = _make(
        logits_data,
        (q, k),
        lambda g: ((g @ k.data) * scale, (np.swapaxes(g, -1, -2) @ q.data) * scale),
        "attention_logits",
    )
    probs = masked_softmax(logits, key_mask)
    p = probs.data
    out = p[..., :, 0, None] * v.data[..., 0, None, :]
    for j in range(1, v.shape[-2]):
        out += p[..., :, j, None] * v.data[..., j, None, :]

    def backward(g):
        return g @ np.swapaxes(v.data, -1, -2), np.swapaxes(p, -1, -2) @ g

    return _make(out, (probs, v), backward, "attention_mix"), p


# ---------------------------------------------------------------- graph


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients accumulate across calls; use ``zero_grad`` between steps.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- parameters


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    trainable: bool = True


class ParameterSet:
    """Ordered name -> leaf tensor mapping."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = trainable
        t.name = name
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.`` keyed by the remaining suffix."""
        head = prefix + "."
        return {n[len(head):]: t for n, t in self._tensors.items() if n.startswith(head)}

    def parameters(self) -> list[Parameter]:
        return [Parameter(n, t, t.requires_grad) for n, t in self._tensors.items()]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self._tensors.items()}
        )


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterSet, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, t in params.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def adam_step(params: ParameterSet, state: AdamState, grads: dict[str, np.ndarray] | None = None) -> None:
    """In-place Adam update with bias correction.

    ``grads`` defaults to each parameter's accumulated ``.grad``; a missing
    gradient counts as zero.
    """
    state.step += 1
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    for name, t in params.items():
        if not t.requires_grad:
            continue
        g = grads.get(name) if grads is not None else t.grad
        if g is None:
            g = np.zeros_like(t.data)
        if g.shape != t.shape or state.m[name].shape != t.shape:
            raise ValueError(f"adam_step shape mismatch for {name}: {g.shape} vs {t.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        t.data = t.data - state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place)."""
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return out


def iter_leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t._backward is None]
