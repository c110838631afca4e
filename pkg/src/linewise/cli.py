"""Command-line entry point: ``linewise <command>``.

Commands: gen-data, train, eval-match, eval-homography, dump-attention.
Verbosity comes from the LINEWISE_LOG environment variable (DEBUG, INFO, ...).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation as Ev
from .estimation import RansacConfig
from .model import CheckpointError, ModelConfig, describe_image, init_params, load_checkpoint
from .synthetic import DatasetError, DatasetSpec, load_dataset, make_dataset_pair, save_dataset
from .training import CHECKPOINT_NAME, LOSS_CSV_NAME, TrainConfig, train_loop

log = logging.getLogger("linewise")


class CLIError(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    threads: int = 1
    explicit_model: bool = False  # whether the config file or overrides set model keys

    BLOCKS = ("model", "train", "ransac", "data")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.BLOCKS) - {"threads"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        threads = int(d.get("threads", 1))
        if threads < 1:
            raise ValueError("threads must be >= 1")
        ransac = d.get("ransac", {})
        unknown = set(ransac) - set(RansacConfig.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ransac keys: {sorted(unknown)}")
        return cls(
            ModelConfig.from_dict(d.get("model", {})),
            TrainConfig.from_dict(d.get("train", {})),
            RansacConfig(**ransac),
            DatasetSpec.from_dict(d.get("data", {})),
            threads,
            bool(d.get("model")),
        )

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "ransac": asdict(self.ransac),
            "data": self.data.to_dict(),
            "threads": self.threads,
        }


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ValueError(f"cannot set {dotted}: {k} is not a section")
    cur[keys[-1]] = value


def build_config(args) -> RunConfig:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise CLIError(f"config file {args.config} does not exist")
        except json.JSONDecodeError as exc:
            raise CLIError(f"config file {args.config} is not valid JSON: {exc}")
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CLIError(f"--set expects key=value, got {item!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        _set_path(raw, key, parsed)
    if args.seed is not None:
        for block in ("train", "ransac", "data"):
            _set_path(raw, f"{block}.seed", args.seed)
    if args.threads is not None:
        raw["threads"] = args.threads
    try:
        return RunConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid configuration: {exc}")


# ---------------------------------------------------------------- helpers


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _open_dataset(path):
    if path is None:
        raise CLIError("--dataset is required")
    try:
        ds = load_dataset(path)
    except DatasetError as exc:
        raise CLIError(str(exc))
    if len(ds) == 0:
        raise CLIError(f"dataset {path} is empty")
    return ds


def _load_model(args, cfg: RunConfig):
    """Parameters and config from --checkpoint, or a fresh seeded model."""
    if args.checkpoint is None:
        return init_params(cfg.model, seed=cfg.train.seed), cfg.model
    try:
        ck = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise CLIError(str(exc))
    if cfg.explicit_model and ck.config != cfg.model:
        raise CLIError("model config differs from the checkpoint's config")
    return ck.params, ck.config


def _pairs(ds, limit):
    n = len(ds) if limit is None else min(limit, len(ds))
    return [ds[i] for i in range(n)]


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: RunConfig, out: Path) -> Path:
    spec = cfg.data
    t0 = time.perf_counter()
    try:
        pairs = [make_dataset_pair(spec, i) for i in range(spec.count)]
    except ValueError as exc:
        raise CLIError(f"generation failed: {exc}")
    path = out / args.name
    save_dataset(path, pairs, spec.to_dict())
    lines = [len(p.lines1) + len(p.lines2) for p in pairs]
    density = float(np.mean([(p.gt > 0).mean() for p in pairs]))
    summary = {
        "path": str(path),
        "pairs": len(pairs),
        "lines_per_pair": float(np.mean(lines)) / 2,
        "gt_density": density,
        "seconds": round(time.perf_counter() - t0, 3),
    }
    print(json.dumps(summary, sort_keys=True))
    return path


def cmd_train(args, cfg: RunConfig, out: Path) -> Path:
    ds = _open_dataset(args.dataset)
    tcfg = cfg.train
    resume = None
    if args.resume:
        resume = out / CHECKPOINT_NAME
        if not resume.exists():
            raise CLIError(f"nothing to resume: {resume} does not exist")
    try:
        result = train_loop(
            ds,
            cfg.model,
            tcfg,
            out_dir=out,
            resume_from=resume,
            on_log=lambda step, loss: print(f"step {step} loss {loss:.6f}", flush=True),
        )
    except (CheckpointError, DatasetError) as exc:
        raise CLIError(str(exc))
    print(json.dumps({"checkpoint": str(out / CHECKPOINT_NAME), "loss_csv": str(out / LOSS_CSV_NAME),
                      "steps": tcfg.steps, "skipped_steps": result.skipped_steps}, sort_keys=True))
    return out / CHECKPOINT_NAME


def _match_eval(pairs, params, model, threads):
    return Ev.evaluate_matches(Ev.match_dataset(pairs, params, model, threads))


def cmd_eval_match(args, cfg: RunConfig, out: Path) -> Path:
    ds = _open_dataset(args.dataset)
    pairs = _pairs(ds, args.limit)
    params, model = _load_model(args, cfg)
    report = {"model": _match_eval(pairs, params, model, cfg.threads).to_dict()}
    if args.compare_untrained:
        base = init_params(model, seed=cfg.train.seed)
        report["untrained"] = _match_eval(pairs, base, model, cfg.threads).to_dict()
    _print_match_table(report)
    path = out / "match_metrics.json"
    _write_json(path, report)
    return path


def _print_match_table(report: dict) -> None:
    print(f"{'model':<10} {'split':<8} {'P':>7} {'R':>7} {'F':>7}")
    for name, r in report.items():
        rows = [("overall", r["overall"])] + list(r["terciles"].items())
        for split, m in rows:
            print(f"{name:<10} {split:<8} {m['precision']:7.3f} {m['recall']:7.3f} {m['f_score']:7.3f}")


def cmd_eval_homography(args, cfg: RunConfig, out: Path) -> Path:
    ds = _open_dataset(args.dataset)
    pairs = _pairs(ds, args.limit)
    params, model = _load_model(args, cfg)

    def run(p):
        results = Ev.match_dataset(pairs, p, model, cfg.threads)
        return Ev.evaluate_homography(pairs, results, cfg.ransac, model.image_width, model.image_height, cfg.threads)

    rep = run(params)
    report = {"model": rep.to_dict()}
    if args.compare_untrained:
        report["untrained"] = run(init_params(model, seed=cfg.train.seed)).to_dict()
    for name, r in report.items():
        print(name, " ".join(f"AUC@{k}={v:.4f}" for k, v in r["auc"].items()))
    path = out / "homography_auc.json"
    _write_json(path, report)
    curve = out / "homography_curve.csv"
    with open(curve, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["corner_error_px", "cumulative_fraction"])
        for e, frac in rep.curve():
            w.writerow([repr(e), repr(frac)])
    return path


def _line_attention(desc, keyline_id: int) -> dict:
    subs = [k for k, s in enumerate(desc.sublines) if s.parent_keyline_id == keyline_id]
    out = []
    for k in subs:
        n_valid = int((~desc.tokens[k].mask).sum())
        layers = [layer[k][:, :n_valid].tolist() for layer in desc.line_attention]
        sig = [layer[:, k, :].tolist() for layer in desc.signature_attention]
        out.append({"subline": desc.sublines[k].index_within_parent, "tokens": n_valid - 1,
                    "line_slot_attention": layers, "signature_attention": sig})
    return {"keyline_id": keyline_id, "sublines": out,
            "signature_columns": [[s.parent_keyline_id, s.index_within_parent] for s in desc.sublines]}


def cmd_dump_attention(args, cfg: RunConfig, out: Path) -> Path:
    ds = _open_dataset(args.dataset)
    if not 0 <= args.pair < len(ds):
        raise CLIError(f"pair {args.pair} not in dataset of {len(ds)} pairs")
    pair = ds[args.pair]
    params, model = _load_model(args, cfg)
    d1 = describe_image(pair.lines1, pair.map1, params, model, record_attention=True)
    if args.line not in d1.keyline_ids:
        raise CLIError(f"line {args.line} is not a described keyline of pair {args.pair}")
    d2 = describe_image(pair.lines2, pair.map2, params, model, record_attention=True)
    match = Ev.match_pair(pair, params, model)
    partner = next((b for a, b, _ in match.matches.pairs if a == args.line), None)
    report = {
        "pair": args.pair,
        "image1": _line_attention(d1, args.line),
        "matched_line_id": partner,
        "image2": _line_attention(d2, partner) if partner is not None else None,
        "heads": model.heads,
        "layers": model.L,
        "signature_layers": model.M,
    }
    path = out / f"attention_pair{args.pair}_line{args.line}.json"
    _write_json(path, report)
    print(json.dumps({"path": str(path), "matched_line_id": partner}))
    return path


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-match": cmd_eval_match,
    "eval-homography": cmd_eval_homography,
    "dump-attention": cmd_dump_attention,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="linewise", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON run config with sections model/train/ransac/data")
    p.add_argument("--seed", type=int, help="overrides the data, train and ransac seeds")
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    p.add_argument("--threads", type=int, help="worker threads for evaluation")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override (JSON value)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--name", default="dataset.lwds")

    t = sub.add_parser("train", help="train on a dataset")
    t.add_argument("--dataset")
    t.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.lwck")

    for name in ("eval-match", "eval-homography"):
        e = sub.add_parser(name)
        e.add_argument("--dataset")
        e.add_argument("--checkpoint", help="omit to evaluate the untrained model")
        e.add_argument("--limit", type=int, help="evaluate only the first N pairs")
        e.add_argument("--compare-untrained", action="store_true")

    d = sub.add_parser("dump-attention", help="attention rows for one line")
    d.add_argument("--dataset")
    d.add_argument("--checkpoint")
    d.add_argument("--pair", type=int, required=True)
    d.add_argument("--line", type=int, required=True)
    return p


def _setup_logging() -> None:
    level = os.environ.get("LINEWISE_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO), format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        print(json.dumps({"effective_config": cfg.to_dict()}, sort_keys=True), flush=True)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
