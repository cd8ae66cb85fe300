"""Command-line entry point: ``cfglab <command> [--config PATH] [--seed N] [--out DIR] [--workers N]``.

Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import OUT_ENV, RunConfig, load_config
from .denoiser import Denoiser, load_checkpoint
from .errors import ConfigError, NumericError
from .evaldata import SampleSet, energy_distance, sliced_wasserstein
from .rng import RandomStream
from .sampling import generate

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig.from_flat()
    changes = {}
    if args.seed is not None:
        changes["eval.seeds"] = [args.seed]
    out = args.out or os.environ.get(OUT_ENV)
    if out:
        changes["run.out_dir"] = out
    if args.workers is not None:
        changes["run.workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def _seed(cfg: RunConfig) -> int:
    return cfg["eval.seeds"][0]


def cmd_train(args, cfg: RunConfig):
    w = cfg["train.w_train"] if args.w_train is None else args.w_train
    harness.get_model(cfg, args.mode, w, _seed(cfg))
    print(harness.checkpoint_path(cfg, args.mode, w, _seed(cfg))[0])


def cmd_sample(args, cfg: RunConfig):
    model, _, doc = load_checkpoint(args.checkpoint)
    if not isinstance(model, Denoiser):
        raise ConfigError(f"{args.checkpoint} is not a denoiser checkpoint")
    kind = args.sampler or cfg["sampler.kind"]
    steps = args.steps or (cfg["schedule.T"] if kind == "ddpm" else cfg["sampler.n_steps"])
    seed = _seed(cfg)
    sc = cfg.sampler_config(args.w, args.cls, seed + harness.SAMPLE_OFFSET, kind=kind, n_steps=steps)
    pts = generate(model, None, sc, cfg.schedule(), workers=cfg["run.workers"])
    path = cfg.out_dir / f"samples_{Path(args.checkpoint).stem}_c{args.cls}_w{harness.fmt(args.w)}_{kind}{steps}_seed{seed}.csv"
    harness.write_samples_csv(path, [(SampleSet(pts, np.full(len(pts), args.cls)), args.w, kind, steps, seed)],
                              cfg.digest)
    print(path)


def _points(path) -> tuple[np.ndarray, list[dict]]:
    rows, _ = harness.read_samples_csv(path)
    if not rows:
        raise ConfigError(f"{path}: no samples")
    return np.array([[r["x"], r["y"]] for r in rows]), rows


def cmd_eval(args, cfg: RunConfig):
    a, rows = _points(args.csv[0])
    seed = _seed(cfg)
    if len(args.csv) == 2:
        b, _ = _points(args.csv[1])
        if cfg["eval.metric"] == "energy":
            value = energy_distance(a, b)
        else:
            value = sliced_wasserstein(a, b, cfg["eval.n_proj"], RandomStream(seed + harness.ORACLE_OFFSET))
        result = {"metric": cfg["eval.metric"], "value": value}
    else:
        classes, ws = {r["class"] for r in rows}, {r["w"] for r in rows}
        if len(classes) != 1 or len(ws) != 1:
            raise ConfigError("oracle comparison needs a CSV with a single class and w")
        c, w = classes.pop(), ws.pop()
        cfg = cfg.replace(**{"eval.n_samples": len(a)})
        value, floor = harness.Evaluator(cfg, seed).score(a, c, w)
        result = {"metric": cfg["eval.metric"], "class": c, "w": w, "value": value, "noise_floor": floor,
                  "ratio": value / floor if floor > 0 else None}
    print(json.dumps(result))


def _summarise(report: harness.RunReport, **group):
    for seed, (value, floor) in report.per_seed(**group).items():
        print(f"  seed {seed}: {value:.4g} (floor {floor:.3g})")


def cmd_toy(args, cfg: RunConfig):
    report = harness.run_toy_comparison(cfg)
    for mode in ("standard", "updated"):
        for w in cfg["eval.w_sample"]:
            print(f"{mode} w={w:g}")
            _summarise(report, loss_mode=mode, w_sample=w)
    print(cfg.out_dir / "toy_report.csv")


def cmd_ablate(args, cfg: RunConfig):
    report = harness.run_ablation_grid(cfg)
    for seed in cfg["eval.seeds"]:
        print(f"seed {seed} (rows w_train {cfg['ablation.w_train']}, cols w_sample {cfg['ablation.w_sample']})")
        print(np.array2string(harness.ablation_matrix(report, cfg, seed), precision=4))
    print(cfg.out_dir / "ablation_matrix.csv")


def cmd_sweep(args, cfg: RunConfig):
    report = harness.run_steps_sweep(cfg)
    for mode in ("standard", "updated"):
        for n in sorted(set(cfg["eval.steps"]) | {cfg["schedule.T"]}):
            print(f"{mode} ddim steps={n}")
            _summarise(report, loss_mode=mode, n_steps=n)
    print(cfg.out_dir / "steps_report.csv")


def cmd_plot(args, cfg: RunConfig):
    pts, rows = _points(args.csv)
    _, digest = harness.read_samples_csv(args.csv)
    labels = [f"class {r['class']}" + (f" w={r['w']:g}" if len({q['w'] for q in rows}) > 1 else "") for r in rows]
    order = list(dict.fromkeys(labels))
    sets = [(pts[[i for i, l in enumerate(labels) if l == lab]], lab) for lab in order]
    path = cfg.out_dir / (Path(args.csv).stem + ".svg")
    harness.emit_scatter_svg(sets, path, digest or cfg.digest, Path(args.csv).name)
    print(path)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="dotted-key TOML run config")
    common.add_argument("--seed", type=int, help="run a single experiment seed")
    common.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else run.out_dir)")
    common.add_argument("--workers", type=int, help="parallel workers")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cfglab", description="Guided diffusion toy experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="train one denoiser")
    t.add_argument("--mode", choices=("standard", "updated"), default="updated")
    t.add_argument("--w-train", type=float)
    t.set_defaults(func=cmd_train)
    s = sub.add_parser("sample", parents=[common], help="checkpoint -> samples CSV")
    s.add_argument("checkpoint")
    s.add_argument("--w", type=float, default=1.0)
    s.add_argument("--class", dest="cls", type=int, default=0)
    s.add_argument("--sampler", choices=("ddpm", "ddim"))
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_sample)
    e = sub.add_parser("eval", parents=[common], help="metric between two CSVs, or one CSV and the oracle")
    e.add_argument("csv", nargs="+")
    e.set_defaults(func=cmd_eval)
    for name, fn, text in (("toy", cmd_toy, "standard vs updated comparison"),
                           ("ablate", cmd_ablate, "w_train x w_sample grid"),
                           ("sweep-steps", cmd_sweep, "DDIM step-count sweep")):
        sub.add_parser(name, parents=[common], help=text).set_defaults(func=fn)
    pl = sub.add_parser("plot", parents=[common], help="samples CSV -> SVG")
    pl.add_argument("csv")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "eval" and len(args.csv) > 2:
            raise ConfigError("eval takes one or two CSV files")
        args.func(args, _config(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
