"""Untrained-vs-trained learning experiment on seeded synthetic splits."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from . import evaluation as Ev
from .estimation import RansacConfig
from .model import ModelConfig, init_params, save_checkpoint
from .synthetic import DatasetSpec, NoiseConfig, make_dataset
from .training import TrainConfig, evaluate_loss, train_loop


@dataclass
class ExperimentConfig:
    train_pairs: int = 200
    test_pairs: int = 50
    train_seed: int = 101
    test_seed: int = 202
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    threads: int = 1


@dataclass
class ExperimentResult:
    metrics: dict
    trained_params: object
    test_pairs: list
    history: list


def _evaluate(pairs, params, cfg: ExperimentConfig) -> dict:
    results = Ev.match_dataset(pairs, params, cfg.model, cfg.threads)
    match = Ev.evaluate_matches(results)
    hom = Ev.evaluate_homography(pairs, results, cfg.ransac, cfg.model.image_width, cfg.model.image_height, cfg.threads)
    return {"match": match.to_dict(), "homography": hom.to_dict()}


def run_learning_experiment(
    cfg: ExperimentConfig, out_dir=None, log: Callable[[str], None] = lambda s: None
) -> ExperimentResult:
    t0 = time.perf_counter()
    train = make_dataset(DatasetSpec(count=cfg.train_pairs, seed=cfg.train_seed, noise=cfg.noise))
    test = make_dataset(DatasetSpec(count=cfg.test_pairs, seed=cfg.test_seed, noise=cfg.noise))
    log(f"generated {len(train)} train / {len(test)} held-out pairs in {time.perf_counter() - t0:.1f}s")

    untrained = init_params(cfg.model, seed=cfg.train.seed)
    loss_start = evaluate_loss(train, untrained, cfg.model, cfg.train)
    before = _evaluate(test, untrained, cfg)
    log(f"untrained: loss {loss_start:.4f} F {before['match']['overall']['f_score']:.4f}")

    result = train_loop(
        train, cfg.model, cfg.train, out_dir=out_dir, on_log=lambda s, l: log(f"step {s} loss {l:.4f}")
    )
    loss_end = evaluate_loss(train, result.params, cfg.model, cfg.train)
    after = _evaluate(test, result.params, cfg)
    log(f"trained: loss {loss_end:.4f} F {after['match']['overall']['f_score']:.4f}")
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "trained.lwck", result.params, cfg.model, {"steps": cfg.train.steps})

    metrics = {
        "loss_start": loss_start,
        "loss_end": loss_end,
        "untrained": before,
        "trained": after,
        "seconds": time.perf_counter() - t0,
        "config": {
            "model": cfg.model.to_dict(),
            "train": asdict(cfg.train),
            "noise": asdict(cfg.noise),
            "train_pairs": cfg.train_pairs,
            "test_pairs": cfg.test_pairs,
        },
    }
    return ExperimentResult(metrics, result.params, test, result.history)
