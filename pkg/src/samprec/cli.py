"""Command-line entry point: ``samprec <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as ds
from .numerics import ConfigError
from .evaluation import (CostModel, evaluate_multi_step, evaluate_state, flops_estimate, rows_to_csv,
                         sample_rate_sweep)
from .sampler import STRATEGIES, SamplingStrategy
from .training import (PRESETS, CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint, preset_config,
                       save_checkpoint, train_epoch, init_state)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


class RunManifest:
    """Resolved inputs and outputs of one command, written before the work starts."""

    def __init__(self, out_dir: Path, command: str, config: dict | None = None, seed: int | None = None,
                 data_dir: Path | None = None):
        self.path = Path(out_dir) / "manifest.json"
        self.data = {
            "command": command,
            "version": __version__,
            "config": config,
            "config_hash": TrainConfig.from_dict(config).hash() if config else None,
            "seed": seed,
            "dataset_fingerprint": ds.fingerprint(data_dir) if data_dir else None,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "outputs": [],
        }
        self.write()

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, sort_keys=True, indent=2))

    def finish(self, outputs) -> None:
        self.data["outputs"] = sorted(str(o) for o in outputs)
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.write()


# ---------------------------------------------------------------------------
# config resolution


def resolve_config(args) -> TrainConfig:
    if getattr(args, "preset", None):
        cfg = preset_config(args.preset)
    else:
        cfg = TrainConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        merged = cfg.to_dict()
        for key, val in raw.items():
            if isinstance(val, dict) and isinstance(merged.get(key), dict):
                merged[key] = {**merged[key], **val}
            else:
                merged[key] = val
        cfg = TrainConfig.from_dict(merged)
    for flag, field in (("sampler", "strategy"), ("sample_rate", "sample_rate"), ("seed", "seed"),
                        ("epochs", "epochs")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, field, val)
    errs = cfg.validate()
    if errs:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errs))
    return cfg


def load_split(data_dir: str, mode: str, steps: int, max_len: int):
    seqs, catalog, _ = ds.load_dataset(data_dir)
    return seqs, catalog, ds.split(seqs, ds.SplitSpec(mode, steps=steps, max_len=max_len))


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    out = Path(args.out)
    manifest = RunManifest(out, "preprocess")
    rows = ds.load_tsv(args.input)
    kept, stats = ds.filter_min_count(rows, args.min_count)
    if not kept:
        raise ds.DataError(f"no interactions left after filtering with min count {args.min_count}")
    catalog = ds.Catalog.from_interactions(kept)
    seqs = ds.build_sequences(kept, catalog)
    ds.save_dataset(out, seqs, catalog, extra={"min_count": args.min_count, "filter": asdict(stats)})
    print(json.dumps({"interactions": len(rows), "kept": len(kept), "users": len(seqs),
                      "items": catalog.num_items, **asdict(stats)}, sort_keys=True))
    manifest.data["dataset_fingerprint"] = ds.fingerprint(out)
    manifest.finish([out / "catalog.json", out / "sequences.bin"])
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = ds.SyntheticSpec()
    if args.spec:
        raw = json.loads(Path(args.spec).read_text())
        unknown = set(raw) - set(ds.SyntheticSpec.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        spec = ds.SyntheticSpec(**raw)
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out)
    manifest = RunManifest(out, "synth", seed=spec.seed)
    try:
        res = ds.generate_synthetic(spec)
    except ds.DataError as exc:
        raise ConfigError(str(exc)) from exc
    ds.save_dataset(out, res.sequences, res.catalog, extra={"spec": asdict(spec), "noise_fraction": res.noise_fraction})
    print(json.dumps({"users": len(res.sequences), "items": res.catalog.num_items,
                      "noise_fraction": res.noise_fraction}, sort_keys=True))
    manifest.data["dataset_fingerprint"] = ds.fingerprint(out)
    manifest.finish([out / "catalog.json", out / "sequences.bin"])
    return EXIT_OK


def _train(cfg: TrainConfig, train_seqs, catalog, out: Path, resume: bool = False):
    ckpt = out / "checkpoint"
    if resume and (ckpt / "manifest.json").exists():
        state = load_checkpoint(ckpt, cfg)
        log(f"resuming after epoch {state.epoch}")
    else:
        state = init_state(cfg, catalog.num_items, catalog.popularity)
    while state.epoch < cfg.epochs:
        try:
            stats = train_epoch(state, train_seqs)
        except TrainingDiverged as exc:
            dump = out / "diverged_batch.npz"
            np.savez(dump, items=exc.items, actions=exc.actions if exc.actions is not None else np.zeros(0))
            raise TrainingDiverged(f"{exc} (batch written to {dump})", exc.items, exc.actions) from exc
        log(f"epoch {stats.epoch}: loss={stats.loss:.4f} sample_rate={stats.sample_rate:.3f}")
        save_checkpoint(state, ckpt)
    save_checkpoint(state, ckpt)
    return state


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    manifest = RunManifest(out, "train", cfg.to_dict(), cfg.seed, Path(args.data))
    seqs, catalog, views = load_split(args.data, args.split, 1, cfg.backbone.max_len)
    state = _train(cfg, views.train, catalog, out, args.resume)
    (out / "history.json").write_text(json.dumps(state.history, sort_keys=True, indent=2))
    manifest.finish([out / "checkpoint", out / "history.json"])
    return EXIT_OK


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError as exc:
        raise ConfigError(f"--k expects comma-separated integers, got {text!r}") from exc
    if not ks or min(ks) <= 0:
        raise ConfigError("--k values must be positive")
    return ks


def _parse_steps(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..")
        steps = list(range(int(lo), int(hi) + 1))
    else:
        steps = [int(s) for s in text.split(",")]
    if not steps or min(steps) < 1 or max(steps) > 5:
        raise ConfigError("--steps must lie within 1..5")
    return steps


def _strategy_override(args, state) -> SamplingStrategy | None:
    if args.sampler is None:
        return None
    rate = args.sample_rate if args.sample_rate is not None else state.config.sample_rate
    return SamplingStrategy(args.sampler, rate)


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    manifest = RunManifest(out, "eval", state.config.to_dict(), state.config.seed, Path(args.data))
    ks = _parse_ks(args.k)
    seqs, catalog, _ = ds.load_dataset(args.data)
    strategy = _strategy_override(args, state)
    if args.mode == "multistep":
        rows = evaluate_multi_step(state, seqs, ks, _parse_steps(args.steps), strategy)
        (out / "multistep.json").write_text(json.dumps(rows, sort_keys=True, indent=2))
        (out / "multistep.csv").write_text(rows_to_csv(rows))
        print(rows_to_csv(rows), end="")
        manifest.finish([out / "multistep.json", out / "multistep.csv"])
        return EXIT_OK
    views = ds.split(seqs, ds.SplitSpec("loo", max_len=state.config.backbone.max_len))
    examples = views.test if args.split == "test" else views.validation
    rep = evaluate_state(state, examples, ks, strategy)
    (out / "metrics.json").write_text(rep.to_json())
    (out / "metrics.csv").write_text(rep.to_csv())
    print(rep.to_json())
    manifest.finish([out / "metrics.json", out / "metrics.csv"])
    return EXIT_OK


def cmd_sweep_b(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    manifest = RunManifest(out, "sweep-b", cfg.to_dict(), cfg.seed, Path(args.data))
    try:
        b_values = [float(b) for b in args.b_list.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--b-list expects comma-separated numbers, got {args.b_list!r}") from exc
    seqs, catalog, views = load_split(args.data, "loo", 1, cfg.backbone.max_len)
    ks = _parse_ks(args.k)

    def run(b: float):
        sub = TrainConfig.from_dict(cfg.to_dict())
        sub.strategy = "auto"
        sub.reward.b = b
        state = _train(sub, views.train, catalog, out / f"b={b:g}")
        return evaluate_state(state, views.test, ks)

    rows = sample_rate_sweep(b_values, run)
    (out / "sweep.json").write_text(json.dumps(rows, sort_keys=True, indent=2))
    (out / "sweep.csv").write_text(rows_to_csv(rows))
    print(rows_to_csv(rows), end="")
    manifest.finish([out / "sweep.json", out / "sweep.csv"])
    return EXIT_OK


def cmd_analyze_sampler(args) -> int:
    state = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    manifest = RunManifest(out, "analyze-sampler", state.config.to_dict(), state.config.seed, Path(args.data))
    seqs, catalog, views = load_split(args.data, "loo", 1, state.config.backbone.max_len)
    rep = evaluate_state(state, views.test, (10,), SamplingStrategy("auto"))
    quality = rep.quality or {"notice": "behaviour labels missing; report skipped"}
    quality["sample_rate"] = rep.sample_rate
    (out / "sampler_quality.json").write_text(json.dumps(quality, sort_keys=True, indent=2))
    print(json.dumps(quality, sort_keys=True, indent=2))
    manifest.finish([out / "sampler_quality.json"])
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = resolve_config(args)
    seq_len = args.seq_len if args.seq_len is not None else cfg.backbone.max_len
    sigma2 = args.sigma ** 2 if args.sigma is not None else args.mu * (1 - args.mu)
    try:
        rep = flops_estimate(CostModel(cfg.backbone.layers, seq_len, args.mu, sigma2, cfg.backbone.d,
                                       cfg.backbone.hidden, args.vocab, sampler=cfg.strategy == "auto"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    row = {**asdict(rep), "mflops": rep.mflops}
    if args.out:
        out = Path(args.out)
        manifest = RunManifest(out, "flops", cfg.to_dict(), cfg.seed)
        (out / "flops.json").write_text(json.dumps(row, sort_keys=True, indent=2))
        manifest.finish([out / "flops.json"])
    print(json.dumps(row, sort_keys=True, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; keys mirror TrainConfig")
    p.add_argument("--preset", choices=sorted(PRESETS), help="published per-dataset settings")
    p.add_argument("--sampler", choices=STRATEGIES, help="selection strategy")
    p.add_argument("--sample-rate", type=float, help="rate for random/last/popular")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samprec", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="TSV log -> filtered dataset directory")
    p.add_argument("--input", required=True)
    p.add_argument("--min-count", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate the labelled synthetic dataset")
    p.add_argument("--spec", help="JSON with SyntheticSpec fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a recommender (and sampler)")
    _config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("loo", "multistep"), default="loo")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("loo", "multistep"), default="loo")
    p.add_argument("--split", choices=("test", "validation"), default="test")
    p.add_argument("--k", default="10,20")
    p.add_argument("--steps", default="1..5")
    p.add_argument("--sampler", choices=STRATEGIES)
    p.add_argument("--sample-rate", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-b", help="retrain per relax factor and tabulate sample rate and cost")
    _config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--b-list", default="-0.5,0,0.5,1,1.5,2")
    p.add_argument("--k", default="10")
    p.set_defaults(func=cmd_sweep_b)

    p = sub.add_parser("analyze-sampler", help="kept/dropped behaviour composition and AUC")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_sampler)

    p = sub.add_parser("flops", help="analytic cost of one scored sequence")
    _config_flags(p)
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--sigma", type=float, help="std of the keep indicator; default sqrt(mu(1-mu))")
    p.add_argument("--seq-len", type=float)
    p.add_argument("--vocab", type=int, default=500)
    p.add_argument("--out")
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        log(f"config error: {exc}")
        return EXIT_CONFIG
    except ds.DataError as exc:
        log(f"data error: {exc}")
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as exc:
        log(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except (TypeError, ValueError) as exc:
        log(f"config error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
