"""Network building blocks: MLPs and masked multi-head self-attention.

Attention works on a *packed* token matrix (only real tokens, one row each)
plus a ``TokenLayout`` describing where each row sits in the padded
``(batch, slots)`` grid. Row-wise maps (projections, MLPs, layer norm) only
ever see the packed matrix, whose shape does not depend on the padding width;
the padded grid is used just for the softmax/mixing over keys.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParameterSet, Tensor, init_uniform


@dataclass(frozen=True)
class TokenLayout:
    batch: int
    slots: int
    rows: np.ndarray  # flat padded index of each packed row
    key_mask: np.ndarray  # (batch, slots), True = padding

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "TokenLayout":
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        b, s = mask.shape
        return cls(b, s, np.flatnonzero(~mask.reshape(-1)), mask)

    @classmethod
    def from_lengths(cls, lengths, slots: int) -> "TokenLayout":
        lengths = np.asarray(lengths, dtype=np.int64)
        if np.any(lengths < 1) or np.any(lengths > slots):
            raise ValueError("sequence lengths must lie in [1, slots]")
        mask = np.arange(slots)[None, :] >= lengths[:, None]
        return cls.from_mask(mask)

    @property
    def n_rows(self) -> int:
        return int(self.rows.size)


def init_linear(params: ParameterSet, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    params.add(f"{name}.w", init_uniform(rng, (fan_in, fan_out), fan_in))
    params.add(f"{name}.b", init_uniform(rng, (fan_out,), fan_in))


def init_mlp(params: ParameterSet, name: str, dims: tuple[int, int, int], rng: np.random.Generator) -> None:
    init_linear(params, f"{name}.fc1", dims[0], dims[1], rng)
    init_linear(params, f"{name}.fc2", dims[1], dims[2], rng)


def init_attention(params: ParameterSet, name: str, dim: int, rng: np.random.Generator) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{name}.{proj}", dim, dim, rng)


def init_layer_norm(params: ParameterSet, name: str, dim: int) -> None:
    params.add(f"{name}.gamma", np.ones(dim))
    params.add(f"{name}.beta", np.zeros(dim))


def mlp(x: Tensor, p: dict[str, Tensor], activation: str = "relu") -> Tensor:
    """Two affine maps with a nonlinearity in between."""
    act = T.ACTIVATIONS[activation]
    hidden = act(T.linear(x, p["fc1.w"], p["fc1.b"]))
    return T.linear(hidden, p["fc2.w"], p["fc2.b"])


def layer_norm(x: Tensor, p: dict[str, Tensor], eps: float = 1e-5) -> Tensor:
    return T.layer_norm(x, p["gamma"], p["beta"], eps)


def _to_heads(packed: Tensor, layout: TokenLayout, heads: int) -> Tensor:
    d = packed.shape[-1]
    padded = T.put_rows(packed, layout.rows, layout.batch * layout.slots)
    grid = T.reshape(padded, (layout.batch, layout.slots, heads, d // heads))
    return T.transpose(grid, (0, 2, 1, 3))


def packed_attention(
    x: Tensor, p: dict[str, Tensor], layout: TokenLayout, heads: int
) -> tuple[Tensor, np.ndarray]:
    """Multi-head self-attention on packed rows ``x`` of shape (rows, D).

    Returns the packed output and probabilities of shape
    (batch, heads, slots, slots); rows/cols of padded slots are meaningless
    except that padded key columns are exactly zero.
    """
    d = x.shape[-1]
    if d % heads:
        raise ValueError(f"dimension {d} is not divisible by {heads} heads")
    q = _to_heads(T.linear(x, p["q.w"], p["q.b"]), layout, heads)
    k = _to_heads(T.linear(x, p["k.w"], p["k.b"]), layout, heads)
    v = _to_heads(T.linear(x, p["v.w"], p["v.b"]), layout, heads)
    mixed, probs = T.attention(q, k, v, layout.key_mask[:, None, None, :])
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (layout.batch * layout.slots, d))
    out = T.linear(T.take_rows(merged, layout.rows), p["o.w"], p["o.b"])
    return out, probs


def multi_head_attention(
    x: Tensor, p: dict[str, Tensor], mask=None, heads: int = 4
) -> tuple[Tensor, np.ndarray]:
    """Self-attention on a padded ``(T, D)`` or ``(B, T, D)`` input.

    ``mask`` (True = blocked) has shape ``(T,)`` or ``(B, T)``. Outputs on
    blocked rows are zero.
    """
    single = x.ndim == 2
    grid = T.reshape(x, (1,) + x.shape) if single else x
    b, s, d = grid.shape
    if mask is None:
        mask = np.zeros((b, s), dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), (b, s))
    layout = TokenLayout.from_mask(mask)
    packed = T.take_rows(T.reshape(grid, (b * s, d)), layout.rows)
    out, probs = packed_attention(packed, p, layout, heads)
    out = T.reshape(T.put_rows(out, layout.rows, b * s), (b, s, d))
    if single:
        return T.reshape(out, (s, d)), probs[0]
    return out, probs
