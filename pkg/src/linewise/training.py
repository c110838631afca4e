"""Triplet-loss training with semi-hard negative mining over paired views."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .geometry import LineSegment2D
from .model import (
    DescriptorMap,
    ModelConfig,
    describe_image,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import AdamState, ParameterSet, Tensor, adam_step

log = logging.getLogger(__name__)

FALLBACKS = ("easiest", "skip")


@dataclass
class TrainingPair:
    lines1: list[LineSegment2D]
    lines2: list[LineSegment2D]
    map1: DescriptorMap
    map2: DescriptorMap
    H: np.ndarray
    gt: np.ndarray  # (len(lines1), len(lines2)) overlap similarities

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        self.gt = np.asarray(self.gt, dtype=np.float64)
        if self.gt.shape != (len(self.lines1), len(self.lines2)):
            raise ValueError(f"gt shape {self.gt.shape} does not match line counts")


@dataclass
class TrainConfig:
    margin: float = 1.0
    lr: float = 1e-3
    steps: int = 2000
    batch_pairs: int = 1
    seed: int = 0
    fallback: str = "easiest"
    checkpoint_every: int = 500
    log_every: int = 50

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0 or self.batch_pairs < 1:
            raise ValueError("steps must be >= 0 and batch_pairs >= 1")
        if self.fallback not in FALLBACKS:
            raise ValueError(f"fallback must be one of {FALLBACKS}")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- mining


def select_positives(gt: np.ndarray, col_ids: Sequence[int] | None = None) -> dict[int, int]:
    """Row -> column of maximal overlap; ties go to the lower column id."""
    gt = np.asarray(gt)
    col_ids = np.arange(gt.shape[1]) if col_ids is None else np.asarray(col_ids)
    out = {}
    for i, row in enumerate(gt):
        best = row.max(initial=0.0)
        if best <= 0:
            continue
        tied = np.flatnonzero(row == best)
        out[i] = int(tied[np.argmin(col_ids[tied])])
    return out


def mine_semi_hard(
    anchor: np.ndarray, positive: np.ndarray, candidates: np.ndarray, fallback: str = "easiest"
) -> int | None:
    """Index of the chosen negative among ``candidates`` rows.

    Prefers the nearest candidate that is still farther from the anchor than
    the positive. Without one, ``fallback="easiest"`` takes the farthest
    candidate and ``"skip"`` returns None.
    """
    candidates = np.atleast_2d(candidates)
    if candidates.shape[0] == 0:
        return None
    d_ap = float(((anchor - positive) ** 2).sum())
    d_an = ((candidates - anchor) ** 2).sum(axis=1)
    semi = np.flatnonzero(d_an > d_ap)
    if semi.size:
        return int(semi[np.argmin(d_an[semi])])
    if fallback == "skip":
        return None
    return int(np.argmax(d_an))


def triplet_loss(a: Tensor, p: Tensor, n: Tensor, margin: float = 1.0) -> Tensor:
    """Batch mean of max(0, margin + |a-p|^2 - |a-n|^2) over rows."""
    return T.mean(triplet_terms(a, p, n, margin))


def triplet_terms(a: Tensor, p: Tensor, n: Tensor, margin: float) -> Tensor:
    dp, dn = a - p, a - n
    return T.relu(T.tsum(dp * dp, axis=1) - T.tsum(dn * dn, axis=1) + margin)


# ---------------------------------------------------------------- steps


@dataclass
class Triplets:
    anchors: list[int]  # keyline ids in image 1
    positives: list[int]
    negatives: list[int]
    terms: Tensor | None


def pair_triplets(pair: TrainingPair, params: ParameterSet, model: ModelConfig, cfg: TrainConfig) -> Triplets:
    """Describe both views, mine one triplet per anchor keyline and return the hinge terms."""
    s1 = describe_image(pair.lines1, pair.map1, params, model)
    s2 = describe_image(pair.lines2, pair.map2, params, model)
    row = {l.id: i for i, l in enumerate(pair.lines1)}
    col = {l.id: j for j, l in enumerate(pair.lines2)}
    gt = pair.gt[np.ix_([row[k] for k in s1.keyline_ids], [col[k] for k in s2.keyline_ids])]
    k1, k2 = s1.keyline_descriptors(), s2.keyline_descriptors()
    v1, v2 = k1.data, k2.data
    ai, pi, ni = [], [], []
    for a, p in select_positives(gt, s2.keyline_ids).items():
        neg = np.flatnonzero(gt[a] <= 0)
        pick = mine_semi_hard(v1[a], v2[p], v2[neg], cfg.fallback)
        if pick is None:
            continue
        ai.append(a)
        pi.append(p)
        ni.append(int(neg[pick]))
    if not ai:
        return Triplets([], [], [], None)
    terms = triplet_terms(T.take_rows(k1, ai), T.take_rows(k2, pi), T.take_rows(k2, ni), cfg.margin)
    ids1, ids2 = s1.keyline_ids, s2.keyline_ids
    return Triplets([ids1[i] for i in ai], [ids2[i] for i in pi], [ids2[i] for i in ni], terms)


@dataclass
class StepResult:
    loss: float | None  # None when the batch had no valid anchors
    anchors: int
    skipped_pairs: int


def batch_loss(
    pairs: Sequence[TrainingPair], params: ParameterSet, model: ModelConfig, cfg: TrainConfig
) -> tuple[Tensor | None, int, int]:
    terms, skipped = [], 0
    for pair in pairs:
        tri = pair_triplets(pair, params, model, cfg)
        if tri.terms is None:
            skipped += 1
        else:
            terms.append(tri.terms)
    if not terms:
        return None, 0, skipped
    flat = T.concat(terms, axis=0) if len(terms) > 1 else terms[0]
    return T.mean(flat), flat.shape[0], skipped


def train_step(
    pairs: Sequence[TrainingPair] | TrainingPair,
    params: ParameterSet,
    model: ModelConfig,
    optimizer: AdamState,
    cfg: TrainConfig,
) -> StepResult:
    """One Adam update on the mean hinge over all anchors of ``pairs``.

    A batch without any anchor leaves parameters and optimizer untouched.
    """
    if isinstance(pairs, TrainingPair):
        pairs = [pairs]
    loss, n, skipped = batch_loss(pairs, params, model, cfg)
    if loss is None:
        log.info("batch has no valid anchors; skipped")
        return StepResult(None, 0, skipped)
    params.zero_grad()
    T.backward(loss)
    adam_step(params, optimizer)
    return StepResult(float(loss.data), n, skipped)


def evaluate_loss(pairs: Sequence[TrainingPair], params: ParameterSet, model: ModelConfig, cfg: TrainConfig) -> float:
    """Mean hinge over every anchor of ``pairs`` without updating anything."""
    total, count = 0.0, 0
    for pair in pairs:
        tri = pair_triplets(pair, params, model, cfg)
        if tri.terms is not None:
            total += float(tri.terms.data.sum())
            count += tri.terms.shape[0]
    if count == 0:
        raise ValueError("no pair provides a valid anchor")
    return total / count


# ---------------------------------------------------------------- loop


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(seed: int, step: int, batch: int, n: int) -> list[int]:
    """Dataset indices used at ``step``; a pure function so resumes replay exactly."""
    out = []
    for q in range(step * batch, (step + 1) * batch):
        out.append(int(epoch_order(seed, q // n, n)[q % n]))
    return out


@dataclass
class TrainResult:
    params: ParameterSet
    optimizer: AdamState
    history: list[tuple[int, float]] = field(default_factory=list)
    skipped_steps: int = 0


CHECKPOINT_NAME = "checkpoint.lwck"
LOSS_CSV_NAME = "loss.csv"


def _save_state(out_dir: Path, params, model, cfg, opt: AdamState, step: int, history) -> None:
    arrays = {f"adam.m/{k}": v for k, v in opt.m.items()}
    arrays.update({f"adam.v/{k}": v for k, v in opt.v.items()})
    arrays["history"] = np.array(history, dtype=np.float64).reshape(-1, 2)
    meta = {"step": step, "adam_step": opt.step, "train": asdict(cfg)}
    tmp = out_dir / (CHECKPOINT_NAME + ".tmp")
    save_checkpoint(tmp, params, model, meta, arrays)
    tmp.replace(out_dir / CHECKPOINT_NAME)
    write_loss_csv(out_dir / LOSS_CSV_NAME, history)


def write_loss_csv(path, history: Sequence[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for step, loss in history:
            w.writerow([int(step), repr(float(loss))])


def read_loss_csv(path) -> list[tuple[int, float]]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [(int(r["step"]), float(r["loss"])) for r in rows]


def _restore(path, model: ModelConfig, cfg: TrainConfig):
    ck = load_checkpoint(path)
    if ck.config != model:
        raise ValueError("checkpoint model config differs from the requested one")
    opt = AdamState(lr=cfg.lr, step=int(ck.meta.get("adam_step", 0)))
    for name in ck.params:
        opt.m[name] = ck.arrays[f"adam.m/{name}"].copy()
        opt.v[name] = ck.arrays[f"adam.v/{name}"].copy()
    hist = [(int(s), float(l)) for s, l in ck.arrays.get("history", np.zeros((0, 2)))]
    return ck.params, opt, int(ck.meta["step"]), hist


def train_loop(
    dataset: Sequence[TrainingPair],
    model: ModelConfig,
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    params: ParameterSet | None = None,
    on_log: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Seeded training over ``dataset`` for ``cfg.steps`` total steps.

    With ``out_dir`` a checkpoint (including Adam moments and the loss
    history) is written every ``cfg.checkpoint_every`` steps and at the end,
    together with a ``loss.csv``. ``resume_from`` continues a run from such a
    checkpoint; the result is bit-identical to an uninterrupted run.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("training dataset is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        params, opt, start, history = _restore(resume_from, model, cfg)
    else:
        params = params if params is not None else init_params(model, seed=cfg.seed)
        opt = AdamState.for_params(params, lr=cfg.lr)
        start, history = 0, []
    skipped = 0
    window: list[float] = []
    for step in range(start, cfg.steps):
        batch = [dataset[i] for i in batch_indices(cfg.seed, step, cfg.batch_pairs, n)]
        res = train_step(batch, params, model, opt, cfg)
        if res.loss is None:
            skipped += 1
        else:
            history.append((step, res.loss))
            window.append(res.loss)
        done = step + 1
        if done % cfg.log_every == 0 and window:
            avg = float(np.mean(window))
            log.info("step %d loss %.4f", done, avg)
            if on_log:
                on_log(done, avg)
            window = []
        if out is not None and (done % cfg.checkpoint_every == 0 or done == cfg.steps):
            _save_state(out, params, model, cfg, opt, done, history)
    if out is not None and start >= cfg.steps:
        _save_state(out, params, model, cfg, opt, start, history)
    return TrainResult(params, opt, history, skipped)
