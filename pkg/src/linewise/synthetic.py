"""Procedural line scenes, homographies and warped descriptor-map pairs.

Stands in for a line detector plus a dense descriptor network: every output
is a pure function of its seeds, so pairs regenerate bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import LineSegment2D, clip_to_image, gt_correspondences, normalize_homography, project_line, project_points
from .model import DescriptorMap
from .training import TrainingPair

MODES = ("random", "grid", "polygons")


def _plain(d: dict) -> dict:
    """JSON-normalized copy (tuples become lists), equal to what a reload yields."""
    return json.loads(json.dumps(d))


def _check_keys(cls, d: dict) -> dict:
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return d


@dataclass
class SceneSpec:
    width: int = 320
    height: int = 240
    n_lines: int = 30
    min_length: float = 24.0
    max_length: float = 160.0
    mode: str = "random"
    grid_shape: tuple[int, int] = (3, 3)
    seed: int = 0

    def __post_init__(self):
        self.grid_shape = tuple(int(g) for g in self.grid_shape)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.n_lines < 1:
            raise ValueError("a scene needs at least one line")
        if not 0 < self.min_length <= self.max_length <= math.hypot(self.width, self.height):
            raise ValueError("need 0 < min_length <= max_length <= image diagonal")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.grid_shape) != 2 or min(self.grid_shape) < 0 or sum(self.grid_shape) < 1:
            raise ValueError("grid_shape must be two non-negative counts, not both zero")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**_check_keys(cls, d))


@dataclass
class HomographySpec:
    max_rotation: float = 0.5
    max_scale: float = 0.2
    max_translation: float = 40.0
    max_perspective: float = 3e-4
    seed: int = 0
    max_tries: int = 1000

    def __post_init__(self):
        if min(self.max_rotation, self.max_scale, self.max_translation, self.max_perspective) < 0:
            raise ValueError("homography magnitudes must be non-negative")
        if self.max_scale >= 1:
            raise ValueError("max_scale must be < 1 so scales stay positive")
        if self.max_tries < 1:
            raise ValueError("max_tries must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "HomographySpec":
        return cls(**_check_keys(cls, d))


@dataclass
class NoiseConfig:
    descriptor_sigma: float = 0.15
    jitter: float = 1.0
    drop_prob: float = 0.2
    split_prob: float = 0.2
    confidence_sigma: float = 0.0

    def __post_init__(self):
        if min(self.descriptor_sigma, self.jitter, self.drop_prob, self.split_prob, self.confidence_sigma) < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.drop_prob >= 1:
            raise ValueError("drop_prob must be < 1")
        if self.split_prob > 1:
            raise ValueError("split_prob must be <= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        return cls(**_check_keys(cls, d))


@dataclass
class MapSpec:
    stride: int = 8
    dim: int = 64
    smoothing: float = 1.0  # Gaussian sigma in cells

    def __post_init__(self):
        if self.stride < 1 or self.dim < 1 or self.smoothing < 0:
            raise ValueError("stride, dim must be >= 1 and smoothing >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "MapSpec":
        return cls(**_check_keys(cls, d))


@dataclass
class SyntheticPair(TrainingPair):
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------- scenes


def _accept(p, q, spec: SceneSpec, idx: int) -> LineSegment2D | None:
    if np.hypot(*(np.asarray(q) - p)) == 0:
        return None
    line = clip_to_image(LineSegment2D.from_points(p, q, idx), spec.width - 1e-9, spec.height - 1e-9)
    if line is None or line.length < spec.min_length:
        return None
    return line


def _random_lines(spec: SceneSpec, rng: np.random.Generator) -> list[LineSegment2D]:
    out: list[LineSegment2D] = []
    while len(out) < spec.n_lines:
        c = rng.uniform([0, 0], [spec.width, spec.height])
        theta = rng.uniform(0, np.pi)
        half = 0.5 * rng.uniform(spec.min_length, spec.max_length)
        d = half * np.array([np.cos(theta), np.sin(theta)])
        line = _accept(c - d, c + d, spec, len(out))
        if line is not None:
            out.append(line)
    return out


def _grid_lines(spec: SceneSpec, rng: np.random.Generator) -> list[LineSegment2D]:
    rows, cols = spec.grid_shape
    W, H = spec.width, spec.height
    out: list[LineSegment2D] = []
    for i in range(rows):
        y = H * (i + 1) / (rows + 1) + rng.uniform(-0.2, 0.2) * H / (rows + 1)
        x0, x1 = rng.uniform(0.02, 0.15) * W, rng.uniform(0.85, 0.98) * W
        out.append(LineSegment2D(x0, y, x1, y, len(out)))
    for j in range(cols):
        x = W * (j + 1) / (cols + 1) + rng.uniform(-0.2, 0.2) * W / (cols + 1)
        y0, y1 = rng.uniform(0.02, 0.15) * H, rng.uniform(0.85, 0.98) * H
        out.append(LineSegment2D(x, y0, x, y1, len(out)))
    return out


def _polygon_lines(spec: SceneSpec, rng: np.random.Generator) -> list[LineSegment2D]:
    out: list[LineSegment2D] = []
    while len(out) < spec.n_lines:
        k = int(rng.integers(3, 7))
        radius = rng.uniform(spec.min_length, max(spec.min_length, spec.max_length)) / (2 * np.sin(np.pi / k))
        c = rng.uniform([0, 0], [spec.width, spec.height])
        phase = rng.uniform(0, 2 * np.pi)
        ang = phase + 2 * np.pi * np.arange(k) / k
        verts = c + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        for a in range(k):
            if len(out) == spec.n_lines:
                break
            line = _accept(verts[a], verts[(a + 1) % k], spec, len(out))
            if line is not None:
                out.append(line)
    return out


def generate_scene(spec: SceneSpec) -> list[LineSegment2D]:
    """Seeded line set inside the image; ids are 0..n-1."""
    rng = np.random.default_rng(spec.seed)
    return {"random": _random_lines, "grid": _grid_lines, "polygons": _polygon_lines}[spec.mode](spec, rng)


# ---------------------------------------------------------------- homographies


def compose_homography(
    width: float, height: float, rotation=0.0, scale=(1.0, 1.0), translation=(0.0, 0.0), perspective=(0.0, 0.0)
) -> np.ndarray:
    """translation . rotation . anisotropic scale . perspective about the image center."""
    cx, cy = width / 2, height / 2
    C = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
    Ci = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    c, s = np.cos(rotation), np.sin(rotation)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    S = np.diag([scale[0], scale[1], 1.0])
    P = np.array([[1, 0, 0], [0, 1, 0], [perspective[0], perspective[1], 1.0]])
    Tr = np.array([[1, 0, translation[0]], [0, 1, translation[1]], [0, 0, 1.0]])
    return Tr @ C @ R @ S @ P @ Ci


def corners_within(H: np.ndarray, width: float, height: float, factor: float = 2.0) -> bool:
    """Whether all four warped corners stay inside the centered box ``factor`` times the image size."""
    corners = np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=np.float64)
    w = (H @ np.c_[corners, np.ones(4)].T)[2]
    if np.any(w <= 1e-9):
        return False
    p = project_points(H, corners)
    mx, my = (factor - 1) / 2 * width, (factor - 1) / 2 * height
    return bool(np.all((p[:, 0] >= -mx) & (p[:, 0] <= width + mx) & (p[:, 1] >= -my) & (p[:, 1] <= height + my)))


def sample_homography(spec: HomographySpec, width: float = 320, height: float = 240) -> np.ndarray:
    """Random homography (unit Frobenius norm) drawn uniformly within the spec's bounds."""
    rng = np.random.default_rng(spec.seed)
    for _ in range(spec.max_tries):
        rot = rng.uniform(-spec.max_rotation, spec.max_rotation)
        sc = rng.uniform(1 - spec.max_scale, 1 + spec.max_scale, size=2)
        tr = rng.uniform(-spec.max_translation, spec.max_translation, size=2)
        pe = rng.uniform(-spec.max_perspective, spec.max_perspective, size=2)
        H = compose_homography(width, height, rot, sc, tr, pe)
        if abs(np.linalg.det(H)) > 1e-12 and corners_within(H, width, height):
            return normalize_homography(H)
    raise ValueError(f"no homography within bounds after {spec.max_tries} tries; spec too aggressive")


# ---------------------------------------------------------------- descriptor maps


def _normalize_cells(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _quantize(x: np.ndarray) -> np.ndarray:
    # Maps are stored as float32; rounding here makes save/load bit-exact.
    return _normalize_cells(x).astype(np.float32).astype(np.float64)


def _bilinear(field: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    rows, cols = field.shape[:2]
    u = np.clip(u, 0, cols - 1)
    v = np.clip(v, 0, rows - 1)
    j0 = np.minimum(np.floor(u).astype(int), cols - 2)
    i0 = np.minimum(np.floor(v).astype(int), rows - 2)
    fu, fv = (u - j0)[..., None], (v - i0)[..., None]
    return (1 - fv) * ((1 - fu) * field[i0, j0] + fu * field[i0, j0 + 1]) + fv * (
        (1 - fu) * field[i0 + 1, j0] + fu * field[i0 + 1, j0 + 1]
    )


def generate_descriptor_map_pair(
    seed: int,
    H: np.ndarray,
    width: int,
    height: int,
    spec: MapSpec,
    noise_sigma: float = 0.0,
    confidence_sigma: float = 0.0,
) -> tuple[DescriptorMap, DescriptorMap]:
    """Base map from a smoothed random field and a second map warped by ``H``.

    The field covers twice the image extent so warped lookups stay inside
    it. ``noise_sigma`` is the per-component standard deviation of the
    Gaussian perturbation added to each unit cell of the second map before
    renormalizing.
    """
    rows, cols = math.ceil(height / spec.stride), math.ceil(width / spec.stride)
    r0, c0 = rows // 2 + 1, cols // 2 + 1
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(rows + 2 * r0, cols + 2 * c0, spec.dim))
    if spec.smoothing > 0:
        base = gaussian_filter(base, sigma=(spec.smoothing, spec.smoothing, 0), mode="reflect")
    base = _normalize_cells(base)
    map1 = _quantize(base[r0 : r0 + rows, c0 : c0 + cols])

    jj, ii = np.meshgrid(np.arange(cols), np.arange(rows))
    centers = np.stack([(jj + 0.5) * spec.stride, (ii + 0.5) * spec.stride], axis=-1).reshape(-1, 2)
    src = project_points(np.linalg.inv(H), centers)
    u = src[:, 0] / spec.stride - 0.5 + c0
    v = src[:, 1] / spec.stride - 0.5 + r0
    warped = _normalize_cells(_bilinear(base, u, v)).reshape(rows, cols, spec.dim)
    if noise_sigma > 0:
        warped = warped + rng.normal(scale=noise_sigma, size=warped.shape)
    map2 = _quantize(warped)

    conf1 = conf2 = None
    if confidence_sigma > 0:
        conf1 = np.clip(1 - np.abs(rng.normal(scale=confidence_sigma, size=(rows, cols))), 0, 1)
        conf2 = np.clip(1 - np.abs(rng.normal(scale=confidence_sigma, size=(rows, cols))), 0, 1)
        conf1, conf2 = (c.astype(np.float32).astype(np.float64) for c in (conf1, conf2))
    return DescriptorMap(map1, spec.stride, conf1), DescriptorMap(map2, spec.stride, conf2)


# ---------------------------------------------------------------- pairs


def _fragments(line: LineSegment2D, rng: np.random.Generator, split_prob: float) -> list[tuple[float, float]]:
    if rng.random() >= split_prob:
        return [(0.0, 1.0)]
    t = rng.uniform(0.3, 0.7)
    gap = rng.uniform(0.0, 0.05)
    return [(0.0, t - gap / 2), (t + gap / 2, 1.0)]


def warp_lines(
    lines1: Sequence[LineSegment2D], H: np.ndarray, noise: NoiseConfig, width: float, height: float, rng
) -> list[LineSegment2D]:
    """Project, drop, fragment, jitter, clip and shuffle; ids are reassigned 0..k-1."""
    out = []
    for line in lines1:
        if rng.random() < noise.drop_prob:
            continue
        p = project_line(H, line)
        a, b = p.p_start, p.p_end
        for t0, t1 in _fragments(line, rng, noise.split_prob):
            q0 = a + t0 * (b - a) + rng.normal(scale=noise.jitter, size=2)
            q1 = a + t1 * (b - a) + rng.normal(scale=noise.jitter, size=2)
            if np.array_equal(q0, q1):
                continue
            c = clip_to_image(LineSegment2D.from_points(q0, q1), width - 1e-9, height - 1e-9)
            if c is not None and c.length >= 2.0:
                out.append(c)
    order = rng.permutation(len(out))
    return [LineSegment2D(out[k].x1, out[k].y1, out[k].x2, out[k].y2, i) for i, k in enumerate(order)]


def make_pair(
    scene: SceneSpec, homography: HomographySpec, noise: NoiseConfig, maps: MapSpec | None = None, seed: int = 0
) -> SyntheticPair:
    """One training pair; ``seed`` drives the descriptor field and line corruption."""
    maps = maps or MapSpec()
    lines1 = generate_scene(scene)
    H = sample_homography(homography, scene.width, scene.height)
    map_seed, line_seed = np.random.SeedSequence(seed).generate_state(2)
    map1, map2 = generate_descriptor_map_pair(
        int(map_seed), H, scene.width, scene.height, maps, noise.descriptor_sigma, noise.confidence_sigma
    )
    lines2 = warp_lines(lines1, H, noise, scene.width, scene.height, np.random.default_rng(int(line_seed)))
    if not lines2:
        raise ValueError("every line was dropped from the second view")
    gt = gt_correspondences(lines1, lines2, H)
    meta = _plain({
        "scene": asdict(scene),
        "homography": asdict(homography),
        "noise": asdict(noise),
        "maps": asdict(maps),
        "seed": int(seed),
    })
    return SyntheticPair(lines1, lines2, map1, map2, H, gt, meta)


def regenerate(meta: dict) -> SyntheticPair:
    return make_pair(
        SceneSpec.from_dict(meta["scene"]),
        HomographySpec.from_dict(meta["homography"]),
        NoiseConfig.from_dict(meta["noise"]),
        MapSpec.from_dict(meta["maps"]),
        meta["seed"],
    )


@dataclass
class DatasetSpec:
    count: int = 10
    seed: int = 0
    scene: SceneSpec = field(default_factory=SceneSpec)
    homography: HomographySpec = field(default_factory=HomographySpec)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    maps: MapSpec = field(default_factory=MapSpec)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("dataset count must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(_check_keys(cls, d))
        for key, typ in (("scene", SceneSpec), ("homography", HomographySpec), ("noise", NoiseConfig), ("maps", MapSpec)):
            if key in d and isinstance(d[key], dict):
                d[key] = typ.from_dict(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def pair_seeds(seed: int, count: int) -> list[tuple[int, int, int]]:
    """Independent (scene, homography, pair) seeds for each dataset entry."""
    states = np.random.SeedSequence(seed).generate_state(3 * count).reshape(count, 3)
    return [tuple(int(s) for s in row) for row in states]


def make_dataset_pair(spec: DatasetSpec, index: int) -> SyntheticPair:
    s_scene, s_hom, s_pair = pair_seeds(spec.seed, spec.count)[index]
    scene = SceneSpec(**{**asdict(spec.scene), "seed": s_scene})
    hom = HomographySpec(**{**asdict(spec.homography), "seed": s_hom})
    return make_pair(scene, hom, spec.noise, spec.maps, s_pair)


def make_dataset(spec: DatasetSpec) -> list[SyntheticPair]:
    return [make_dataset_pair(spec, i) for i in range(spec.count)]


# ---------------------------------------------------------------- container

DATASET_MAGIC = b"LWDS"
DATASET_VERSION = 1


class DatasetError(ValueError):
    pass


def _array_bytes(a: np.ndarray | None) -> bytes:
    if a is None:
        return struct.pack("<B", 0)
    a = np.asarray(a, dtype="<f8")
    return struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def _read_array(buf: bytes, pos: int) -> tuple[np.ndarray | None, int]:
    (ndim,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if ndim == 0:
        return None, pos
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    n = int(np.prod(shape))
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
    return arr, pos + 8 * n


def _lines_json(lines: Sequence[LineSegment2D]) -> list[dict]:
    return [l.to_dict() for l in lines]


def pair_to_bytes(pair: TrainingPair) -> bytes:
    head = json.dumps(
        {
            "lines1": _lines_json(pair.lines1),
            "lines2": _lines_json(pair.lines2),
            "meta": getattr(pair, "meta", {}),
        },
        sort_keys=True,
    ).encode()
    out = io.BytesIO()
    out.write(struct.pack("<I", len(head)))
    out.write(head)
    for m in (pair.map1, pair.map2):
        blob = m.to_bytes()
        out.write(struct.pack("<I", len(blob)))
        out.write(blob)
        out.write(_array_bytes(m.confidence))
    out.write(_array_bytes(pair.gt))
    out.write(np.asarray(pair.H, dtype="<f8").reshape(9).tobytes())
    return out.getvalue()


def pair_from_bytes(buf: bytes) -> SyntheticPair:
    try:
        (n,) = struct.unpack_from("<I", buf, 0)
        head = json.loads(buf[4 : 4 + n])
        pos = 4 + n
        maps = []
        for _ in range(2):
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            m, _ = DescriptorMap.from_bytes(buf[pos : pos + ln])
            pos += ln
            m.confidence, pos = _read_array(buf, pos)
            maps.append(m)
        gt, pos = _read_array(buf, pos)
        H = np.frombuffer(buf, dtype="<f8", count=9, offset=pos).reshape(3, 3).copy()
        pos += 72
    except (struct.error, ValueError, KeyError) as exc:
        raise DatasetError(f"malformed pair block: {exc}") from exc
    if pos != len(buf):
        raise DatasetError("trailing bytes in pair block")
    lines1 = [LineSegment2D.from_dict(d) for d in head["lines1"]]
    lines2 = [LineSegment2D.from_dict(d) for d in head["lines2"]]
    return SyntheticPair(lines1, lines2, maps[0], maps[1], H, gt, head.get("meta", {}))


def save_dataset(path, pairs: Sequence[TrainingPair], spec: dict | None = None) -> None:
    """Write a versioned container.

    Layout: magic, u32 version, u32 header length, JSON header holding the
    spec and a per-pair index (offset, length, crc32), then the pair blocks.
    A trailing sha256 covers everything before it.
    """
    blocks = [pair_to_bytes(p) for p in pairs]
    index, offset = [], 0
    for b in blocks:
        index.append({"offset": offset, "length": len(b), "crc32": zlib.crc32(b)})
        offset += len(b)
    header = json.dumps(
        {"version": DATASET_VERSION, "count": len(blocks), "spec": spec or {}, "index": index}, sort_keys=True
    ).encode()
    body = DATASET_MAGIC + struct.pack("<II", DATASET_VERSION, len(header)) + header + b"".join(blocks)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


class Dataset:
    """Lazily loaded dataset file; pairs are read and checked on access."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise DatasetError(f"dataset {self.path} does not exist")
        with open(self.path, "rb") as f:
            fixed = f.read(12)
            if len(fixed) < 12 or fixed[:4] != DATASET_MAGIC:
                raise DatasetError(f"{self.path} is not a dataset file")
            version, hlen = struct.unpack("<II", fixed[4:])
            if version != DATASET_VERSION:
                raise DatasetError(f"dataset version {version} is not supported (expected {DATASET_VERSION})")
            try:
                self.header = json.loads(f.read(hlen))
            except ValueError as exc:
                raise DatasetError(f"corrupted dataset header: {exc}") from exc
        self._data_start = 12 + hlen
        self.index = self.header["index"]
        self.spec = self.header.get("spec", {})

    def __len__(self) -> int:
        return len(self.index)

    def read_block(self, i: int) -> bytes:
        entry = self.index[i]
        with open(self.path, "rb") as f:
            f.seek(self._data_start + entry["offset"])
            block = f.read(entry["length"])
        if len(block) != entry["length"] or zlib.crc32(block) != entry["crc32"]:
            raise DatasetError(f"pair {i} failed its checksum")
        return block

    def __getitem__(self, i: int) -> SyntheticPair:
        if not -len(self) <= i < len(self):
            raise IndexError(f"pair index {i} out of range for {len(self)} pairs")
        return pair_from_bytes(self.read_block(i % len(self)))

    def __iter__(self) -> Iterator[SyntheticPair]:
        for i in range(len(self)):
            yield self[i]

    def take(self, k: int) -> list[SyntheticPair]:
        return [self[i] for i in range(min(k, len(self)))]

    def verify(self) -> None:
        """Check the whole-file digest."""
        raw = self.path.read_bytes()
        if hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
            raise DatasetError("dataset file checksum mismatch")


def load_dataset(path, verify: bool = True) -> Dataset:
    ds = Dataset(path)
    if verify:
        ds.verify()
    return ds
