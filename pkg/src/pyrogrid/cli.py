"""Command-line front end: ``pyrogrid {gen-data,train,evaluate,predict,report}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .environment import GeneratorConfig, load_dataset, split, write_dataset
from .errors import (
    ConfigError, EmptyInput, EmptyRun, FormatError, InsufficientData, NonFiniteValue, SplitMismatch,
    SplitOutOfRange,
)
from .metrics import MetricTable
from .nets import decode_obs, predict_fire
from .trainer import TrainConfig, _net_from, evaluate, online_states, thread_limit, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_ERRORS = (FileNotFoundError, IsADirectoryError, FormatError, SplitOutOfRange, SplitMismatch, EmptyRun,
               InsufficientData, EmptyInput)


# ---------------------------------------------------------------- helpers
def _read_json(path) -> dict:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return d


def _manifest_path(data) -> Path:
    p = Path(data)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise FileNotFoundError(f"no dataset manifest at {p}")
    return p


def _splits(data, which: str = "val"):
    manifest, series = load_dataset(_manifest_path(data))
    parts = [split(gs, manifest) for gs in series]
    train_s = [p[0] for p in parts]
    if which == "train":
        return manifest, series, [gs.slice(0, 0) for gs in train_s], train_s
    return manifest, series, train_s, [p[1] for p in parts]


def _run_config(checkpoint, explicit) -> TrainConfig:
    if explicit:
        return TrainConfig.load(explicit)
    ckpt = Path(checkpoint)
    for cand in (ckpt.parent / "config.json", ckpt.parent.parent / "config.json"):
        if cand.exists():
            return TrainConfig.load(cand)
    raise ConfigError(f"no config.json beside {ckpt}; pass --config")


def write_pgm(path, probs: np.ndarray) -> None:
    """Binary graymap with pixel = round(255 * p)."""
    img = np.floor(255.0 * np.clip(probs, 0.0, 1.0) + 0.5).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path} is not a binary graymap")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------- commands
def cmd_gen_data(args) -> int:
    d = _read_json(args.config) if args.config else {}
    seed = d.pop("seed", 0)
    val_weeks = d.pop("val_weeks", None)
    known = {f.name for f in fields(GeneratorConfig)}
    bad = sorted(set(d) - known)
    if bad:
        raise ConfigError(f"unknown generator fields: {bad}")
    overrides = {"n_agents": args.agents, "grid": args.grid, "weeks": args.weeks, "train_weeks": args.train_weeks}
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.decorrelate:
        d["decorrelate"] = True
    seed = args.seed if args.seed is not None else seed
    try:
        cfg = GeneratorConfig(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    if cfg.grid % 16 or cfg.train_weeks >= cfg.weeks:
        raise ConfigError("grid must be a multiple of 16 and train_weeks below weeks")
    out = Path(args.out)
    manifest = write_dataset(out, cfg, seed, val_weeks)
    (out / "gen_config.json").write_text(json.dumps({**asdict(cfg), "seed": seed, "val_weeks": manifest.val_weeks},
                                                    indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(manifest.agents)} agent files and manifest.json to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    d = _read_json(args.config) if args.config else {}
    manifest, series, train_s, _ = _splits(args.data)
    C, H = train_s[0].obs.shape[1:3]
    for key, value in (("n_agents", len(series)), ("grid", H), ("channels", C)):
        if d.setdefault(key, value) != value:
            raise ConfigError(f"config field '{key}' is {d[key]} but the dataset has {value}")
    if args.static:
        d.update(static_only=True, use_sys_id=False, use_exchange=False)
    if args.no_exchange:
        d["use_exchange"] = False
    if args.no_sysid:
        d["use_sys_id"] = False
    if args.reward:
        d["reward"] = {"iou": "mean_iou", "adversarial": "adversarial_max_loss"}[args.reward]
    if args.episodes is not None:
        d["episodes"] = args.episodes
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = TrainConfig.from_dict(d)
    print(f"training {cfg.method}: {cfg.n_agents} agents, {train_s[0].weeks} weeks, {cfg.episodes} episodes",
          file=sys.stderr)

    def progress(e, loss):
        print(f"episode {e}/{cfg.episodes}  pred_loss {loss:.5f}", file=sys.stderr)

    art = train(cfg, train_s, out_dir=args.out, progress=progress)
    print(f"wrote {len(art.checkpoints)} checkpoints to {Path(args.out) / 'checkpoints'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _run_config(args.checkpoint, args.config)
    _, _, warm, score = _splits(args.data, args.split)
    res = evaluate(args.checkpoint, cfg, warm, score)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    summary = res.table.by_agent()
    (out / "table.csv").write_text(summary.to_csv(means=False))
    (out / "horizons.csv").write_text(res.table.to_csv())
    (out / "obs_mse.json").write_text(json.dumps([None if np.isnan(v) else float(v) for v in res.obs_mse]) + "\n")
    print(res.table.to_text(), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _run_config(args.checkpoint, args.config)
    _, series, _, _ = _splits(args.data)
    T = series[0].weeks
    if not 0 <= args.week < T - cfg.horizon_max:
        raise ConfigError(f"--week must lie in [0, {T - cfg.horizon_max}), got {args.week}")
    net = _net_from(args.checkpoint, cfg, len(series))
    frames = np.stack([gs.obs[:args.week + 1] for gs in series])
    with thread_limit():
        h = online_states(net, frames, cfg.static_only)[:, -1:]
        with nx.no_grad():
            recon = decode_obs(h, net).data[:, 0, 0]        # fire channel of the next-week reconstruction
            fire = predict_fire(h, net).data[:, 0]          # (A, L, H, W)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    for a in range(len(series)):
        write_pgm(out / f"agent{a}_week{args.week}_recon.pgm", recon[a])
        for j, l in enumerate(cfg.horizons):
            write_pgm(out / f"agent{a}_week{args.week}_h{l}.pgm", fire[a, j])
    print(f"wrote {len(series) * (1 + len(cfg.horizons))} images to {out}")
    return EXIT_OK


def collect_tables(run_dir) -> MetricTable:
    run_dir = Path(run_dir)
    paths = sorted(run_dir.rglob("table.csv")) if run_dir.is_dir() else []
    if not paths:
        raise EmptyRun(f"no evaluation tables under {run_dir}")
    table = MetricTable()
    for p in paths:
        table.extend(MetricTable.from_csv(p.read_text()))
    return table


def cmd_report(args) -> int:
    print(collect_tables(args.run).to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- entry point
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pyrogrid", description="Multi-agent wildfire forecasting on grid maps.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesise a dataset")
    g.add_argument("--config", help="JSON with generator fields, plus optional seed and val_weeks")
    g.add_argument("--out", required=True)
    g.add_argument("--agents", type=int)
    g.add_argument("--grid", type=int)
    g.add_argument("--weeks", type=int)
    g.add_argument("--train-weeks", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--decorrelate", action="store_true", help="draw the observed channels from an independent world")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train agents on a dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="manifest.json or the directory holding it")
    t.add_argument("--out", required=True)
    t.add_argument("--episodes", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-exchange", action="store_true")
    t.add_argument("--no-sysid", action="store_true")
    t.add_argument("--static", action="store_true")
    t.add_argument("--reward", choices=("iou", "adversarial"))
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("val", "train"), default="val")
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("predict", help="write forecast maps as PGM images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--week", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_predict)

    r = sub.add_parser("report", help="compare every evaluated method under a directory")
    r.add_argument("--run", required=True)
    r.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteValue, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
