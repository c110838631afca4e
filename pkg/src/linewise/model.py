"""Line-Transformer descriptor network.

Pipeline per image: keylines -> sublines -> point tokens looked up in a dense
descriptor map -> masked transformer whose [LINE] slot becomes the subline
descriptor -> line-signature message passing over all sublines of the image.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .geometry import (
    LineSegment2D,
    Subline,
    build_adjacency,
    line_attributes,
    sample_points,
    split_into_sublines,
    token_count,
)
from .tensor import ParameterSet, Tensor, init_uniform


@dataclass
class ModelConfig:
    D: int = 64
    L: int = 3
    M: int = 2
    heads: int = 4
    v: float = 8.0
    n_min: int = 2
    n_max: int = 21
    image_width: int = 320
    image_height: int = 240
    mlp_hidden: int | None = None
    activation: str = "relu"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.D < 1 or self.heads < 1 or self.D % self.heads:
            raise ValueError(f"D={self.D} must be a positive multiple of heads={self.heads}")
        if self.L < 0 or self.M < 0:
            raise ValueError("layer counts must be non-negative")
        if self.n_min < 2 or self.n_max < self.n_min:
            raise ValueError(f"token bounds must satisfy 2 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        if not self.v > 0:
            raise ValueError("sampling interval v must be positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image size must be positive")
        if self.activation not in T.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or 2 * self.D

    @property
    def slots(self) -> int:
        return self.n_max + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- descriptor maps

MAP_MAGIC = b"LWDM"


@dataclass
class DescriptorMap:
    """Grid of unit descriptors; cell (i, j) sits at pixel ((j + .5) s, (i + .5) s)."""

    grid: np.ndarray
    stride: int
    confidence: np.ndarray | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3:
            raise ValueError("descriptor grid must be (rows, cols, D)")
        norms = np.linalg.norm(self.grid, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("descriptor map cells must be unit vectors")

    @property
    def rows(self) -> int:
        return self.grid.shape[0]

    @property
    def cols(self) -> int:
        return self.grid.shape[1]

    @property
    def dim(self) -> int:
        return self.grid.shape[2]

    @property
    def width(self) -> float:
        return self.cols * self.stride

    @property
    def height(self) -> float:
        return self.rows * self.stride

    def _bilinear(self, field: np.ndarray, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        tol = 1e-6
        if (
            np.any(xy[:, 0] < -tol)
            or np.any(xy[:, 1] < -tol)
            or np.any(xy[:, 0] > self.width + tol)
            or np.any(xy[:, 1] > self.height + tol)
        ):
            raise ValueError("lookup coordinate outside the image")
        u = np.clip(xy[:, 0] / self.stride - 0.5, 0, self.cols - 1)
        v = np.clip(xy[:, 1] / self.stride - 0.5, 0, self.rows - 1)
        j0 = np.floor(u).astype(int)
        i0 = np.floor(v).astype(int)
        j1 = np.minimum(j0 + 1, self.cols - 1)
        i1 = np.minimum(i0 + 1, self.rows - 1)
        fu = (u - j0)[:, None]
        fv = (v - i0)[:, None]
        if field.ndim == 2:
            field = field[..., None]
        out = (
            (1 - fv) * ((1 - fu) * field[i0, j0] + fu * field[i0, j1])
            + fv * ((1 - fu) * field[i1, j0] + fu * field[i1, j1])
        )
        return out

    def lookup_many(self, xy: np.ndarray) -> np.ndarray:
        out = self._bilinear(self.grid, xy)
        norm = np.linalg.norm(out, axis=-1, keepdims=True)
        if np.any(norm == 0):
            raise ValueError("interpolated descriptor vanished")
        return out / norm

    def lookup(self, x: float, y: float) -> np.ndarray:
        return self.lookup_many(np.array([[x, y]]))[0]

    def confidence_at(self, x: float, y: float) -> float:
        if self.confidence is None:
            return 1.0
        return float(np.clip(self._bilinear(self.confidence, np.array([[x, y]]))[0, 0], 0.0, 1.0))

    def to_bytes(self) -> bytes:
        header = MAP_MAGIC + struct.pack("<4I", self.rows, self.cols, self.stride, self.dim)
        return header + self.grid.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["DescriptorMap", int]:
        if buf[offset : offset + 4] != MAP_MAGIC:
            raise ValueError("not a descriptor-map blob")
        rows, cols, stride, dim = struct.unpack_from("<4I", buf, offset + 4)
        start = offset + 20
        count = rows * cols * dim
        end = start + 4 * count
        if end > len(buf):
            raise ValueError("truncated descriptor-map blob")
        grid = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(rows, cols, dim)
        return cls(grid.astype(np.float64), int(stride)), end

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DescriptorMap":
        return cls.from_bytes(Path(path).read_bytes())[0]


def lookup_point_embedding(dmap: DescriptorMap, x: float, y: float) -> np.ndarray:
    """Bilinear lookup at pixel (x, y), renormalized to unit length."""
    return dmap.lookup(x, y)


# ---------------------------------------------------------------- parameters


def init_params(config: ModelConfig, seed: int = 0) -> ParameterSet:
    rng = np.random.default_rng(seed)
    D, H = config.D, config.hidden
    params = ParameterSet()
    params.add("line_token", init_uniform(rng, (D,), D))
    nn.init_mlp(params, "positional", (3, D, D), rng)
    for i in range(config.L):
        pre = f"transformer.{i}"
        nn.init_attention(params, f"{pre}.attn", D, rng)
        nn.init_layer_norm(params, f"{pre}.ln1", D)
        nn.init_mlp(params, f"{pre}.mlp", (D, H, D), rng)
        nn.init_layer_norm(params, f"{pre}.ln2", D)
    nn.init_mlp(params, "signature.attributes", (5, D, D), rng)
    for j in range(config.M):
        pre = f"signature.{j}"
        nn.init_attention(params, f"{pre}.attn", D, rng)
        nn.init_mlp(params, f"{pre}.mlp", (2 * D, 2 * D, D), rng)
    nn.init_mlp(params, "signature.final", (D, D, D), rng)
    return params


def check_params(params: ParameterSet, config: ModelConfig) -> None:
    expected = init_params(config, 0)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter set does not match config (missing={missing}, extra={extra})")
    for name, t in expected.items():
        if params[name].shape != t.shape:
            raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {t.shape}")


# ---------------------------------------------------------------- tokenizer


@dataclass
class TokenSequence:
    embeddings: np.ndarray  # (slots, D); row 0 holds the [LINE] embedding
    positional: np.ndarray  # (slots, D)
    mask: np.ndarray  # (slots,), True = padding
    n_actual: int
    provenance: tuple[int, int]  # (keyline id, subline index)
    point_inputs: np.ndarray = field(repr=False)  # (n, 3): x/W, y/H, c

    @property
    def point_embeddings(self) -> np.ndarray:
        return self.embeddings[1 : self.n_actual + 1]


def _point_inputs(points, config: ModelConfig) -> np.ndarray:
    return np.array([[p.x / config.image_width, p.y / config.image_height, p.c] for p in points])


def _line_slot_positional(params: ParameterSet, config: ModelConfig) -> Tensor:
    return nn.mlp(Tensor(np.zeros((1, 3))), params.group("positional"), config.activation)


def positional_embedding(points, params: ParameterSet, config: ModelConfig) -> Tensor:
    """(n + 1, D) positional rows; row 0 is the MLP at the zero input."""
    if len(points) < config.n_min:
        raise ValueError(f"{len(points)} points is below n_min={config.n_min}")
    line_row = _line_slot_positional(params, config)
    rows = nn.mlp(Tensor(_point_inputs(points, config)), params.group("positional"), config.activation)
    return T.concat([line_row, rows], axis=0)


def tokenize_line(sub: Subline, dmap: DescriptorMap, params: ParameterSet, config: ModelConfig) -> TokenSequence:
    points = sample_points(sub.segment, config.v, dmap.confidence_at, n_min=1)
    n = len(points)
    if not config.n_min <= n <= config.n_max:
        raise ValueError(f"subline has {n} tokens, outside [{config.n_min}, {config.n_max}]")
    slots = config.slots
    emb = np.zeros((slots, config.D))
    emb[0] = params["line_token"].data
    emb[1 : n + 1] = dmap.lookup_many(np.array([[p.x, p.y] for p in points]))
    pos = np.zeros((slots, config.D))
    pos[: n + 1] = positional_embedding(points, params, config).data
    mask = np.ones(slots, dtype=bool)
    mask[: n + 1] = False
    return TokenSequence(
        emb, pos, mask, n, (sub.parent_keyline_id, sub.index_within_parent), _point_inputs(points, config)
    )


# ---------------------------------------------------------------- transformer


@dataclass
class TransformerOutput:
    descriptors: Tensor  # (B, D), unit rows
    line_attention: list[np.ndarray]  # per layer, (B, heads, slots): [LINE]-slot query rows
    layout: nn.TokenLayout


def transformer_forward(
    batch: Sequence[TokenSequence], params: ParameterSet, config: ModelConfig, record_attention: bool = False
) -> TransformerOutput:
    if not batch:
        raise ValueError("empty batch")
    slots = batch[0].mask.size
    if any(s.mask.size != slots for s in batch):
        raise ValueError("token sequences in a batch must share the padding width")
    lengths = np.array([s.n_actual + 1 for s in batch])
    layout = nn.TokenLayout.from_lengths(lengths, slots)
    starts = np.r_[0, np.cumsum(lengths)[:-1]]
    point_rows = np.setdiff1d(np.arange(layout.n_rows), starts)

    pos = params.group("positional")
    line_row = T.add(T.reshape(params["line_token"], (1, config.D)), _line_slot_positional(params, config))
    inputs = np.concatenate([s.point_inputs for s in batch])
    embedded = np.concatenate([s.point_embeddings for s in batch])
    points = T.add(Tensor(embedded), nn.mlp(Tensor(inputs), pos, config.activation))
    z = T.add(
        T.put_rows(T.take_rows(line_row, np.zeros(len(batch), dtype=int)), starts, layout.n_rows),
        T.put_rows(points, point_rows, layout.n_rows),
    )

    records = []
    for i in range(config.L):
        pre = f"transformer.{i}"
        att, probs = nn.packed_attention(z, params.group(f"{pre}.attn"), layout, config.heads)
        z = nn.layer_norm(T.add(att, z), params.group(f"{pre}.ln1"), config.ln_eps)
        z = nn.layer_norm(
            T.add(nn.mlp(z, params.group(f"{pre}.mlp"), config.activation), z),
            params.group(f"{pre}.ln2"),
            config.ln_eps,
        )
        if record_attention:
            records.append(probs[:, :, 0, :].copy())
    return TransformerOutput(T.l2_normalize(T.take_rows(z, starts)), records, layout)


# ---------------------------------------------------------------- line signature network


@dataclass
class SignatureOutput:
    descriptors: Tensor  # (m, D), unit rows
    attention: list[np.ndarray]  # per layer, (heads, m, m)


def line_signature_forward(
    descriptors: Tensor,
    attributes: np.ndarray,
    params: ParameterSet,
    config: ModelConfig,
    record_attention: bool = False,
) -> SignatureOutput:
    m = descriptors.shape[0]
    if m == 0:
        raise ValueError("line signature network needs at least one line")
    attributes = np.asarray(attributes, dtype=np.float64)
    if attributes.shape != (m, 5):
        raise ValueError(f"attributes must be ({m}, 5)")
    s = T.add(descriptors, nn.mlp(Tensor(attributes), params.group("signature.attributes"), config.activation))
    layout = nn.TokenLayout.from_lengths([m], m)
    records = []
    for j in range(config.M):
        pre = f"signature.{j}"
        msg, probs = nn.packed_attention(s, params.group(f"{pre}.attn"), layout, config.heads)
        update = nn.mlp(T.concat([s, msg], axis=1), params.group(f"{pre}.mlp"), config.activation)
        s = T.add(s, update)
        if record_attention:
            records.append(probs[0].copy())
    out = T.l2_normalize(nn.mlp(s, params.group("signature.final"), config.activation))
    return SignatureOutput(out, records)


# ---------------------------------------------------------------- whole image


@dataclass
class LineDescriptorSet:
    descriptors: Tensor  # (m, D) per subline
    sublines: list[Subline]
    keylines: list[LineSegment2D]
    adjacency: np.ndarray  # (keylines, sublines)
    tokens: list[TokenSequence] = field(default_factory=list, repr=False)
    line_attention: list[np.ndarray] = field(default_factory=list, repr=False)
    signature_attention: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def keyline_ids(self) -> list[int]:
        return [k.id for k in self.keylines]

    def keyline_descriptors(self) -> Tensor:
        """Subline descriptors averaged per keyline, renormalized."""
        return T.l2_normalize(T.matmul(Tensor(self.adjacency), self.descriptors))


def valid_keylines(lines: Sequence[LineSegment2D], config: ModelConfig) -> list[LineSegment2D]:
    return [l for l in lines if token_count(l.length, config.v) >= config.n_min]


def subline_attributes(sublines: Sequence[Subline], config: ModelConfig) -> np.ndarray:
    diag = math.hypot(config.image_width, config.image_height)
    rows = []
    for s in sublines:
        mx, my, length, c, sn = line_attributes(s.segment)
        rows.append([mx / config.image_width, my / config.image_height, length / diag, c, sn])
    return np.array(rows)


def describe_image(
    lines: Sequence[LineSegment2D],
    dmap: DescriptorMap,
    params: ParameterSet,
    config: ModelConfig,
    record_attention: bool = False,
) -> LineDescriptorSet:
    keylines = valid_keylines(lines, config)
    if not keylines:
        raise ValueError("no line survives the token-count filter")
    ids = [k.id for k in keylines]
    if len(set(ids)) != len(ids):
        raise ValueError("keyline ids must be unique")
    sublines = [s for k in keylines for s in split_into_sublines(k, config.v, config.n_max)]
    tokens = [tokenize_line(s, dmap, params, config) for s in sublines]
    tf = transformer_forward(tokens, params, config, record_attention)
    sig = line_signature_forward(
        tf.descriptors, subline_attributes(sublines, config), params, config, record_attention
    )
    return LineDescriptorSet(
        sig.descriptors,
        sublines,
        keylines,
        build_adjacency(ids, sublines),
        tokens,
        tf.line_attention,
        sig.attention,
    )


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"LWCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_blob(out: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    out.write(struct.pack("<H", len(raw)))
    out.write(raw)
    out.write(struct.pack("<B", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def checkpoint_bytes(
    params: ParameterSet,
    config: ModelConfig,
    meta: dict | None = None,
    arrays: dict[str, np.ndarray] | None = None,
) -> bytes:
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<I", CKPT_VERSION))
    block = json.dumps({"model": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    out.write(struct.pack("<I", len(block)))
    out.write(block)
    blobs = [(f"param/{n}", t.data) for n, t in params.items()]
    blobs += [(f"extra/{n}", a) for n, a in (arrays or {}).items()]
    out.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        _write_blob(out, name, arr)
    payload = out.getvalue()
    return payload + hashlib.sha256(payload).digest()


def save_checkpoint(path, params, config, meta=None, arrays=None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, config, meta, arrays))


@dataclass
class Checkpoint:
    params: ParameterSet
    config: ModelConfig
    meta: dict
    arrays: dict[str, np.ndarray]


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 4 + 4 + 4 + 32 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    payload, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted file)")
    try:
        pos = 8
        (n,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        block = json.loads(payload[pos : pos + n])
        pos += n
        (count,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        params, arrays = ParameterSet(), {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos : pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<B", payload, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", payload, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(payload, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
            kind, _, key = name.partition("/")
            if kind == "param":
                params.add(key, arr)
            else:
                arrays[key] = arr
        if pos != len(payload):
            raise CheckpointError("trailing bytes in checkpoint payload")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    config = ModelConfig.from_dict(block["model"])
    check_params(params, config)
    return Checkpoint(params, config, block.get("meta", {}), arrays)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return parse_checkpoint(path.read_bytes())
