"""Experiment orchestration: toy comparison, ablation grid, DDIM step sweep.

Each experiment seed fans out to three independent seeds by fixed offsets
(training, sampling, oracle).  Grid work is split per seed; seeds may run in
worker processes, and rows are written in seed order as they complete so a
crash leaves a valid partial CSV.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .config import RunConfig, digest_of
from .denoiser import Denoiser, init_denoiser, load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericError
from .evaldata import (
    SampleSet,
    energy_distance,
    mean_pairwise_distance,
    sample_mixture,
    sliced_wasserstein,
    tilted_target_sample,
)
from .rng import RandomStream
from .sampling import generate
from .training import train

log = logging.getLogger(__name__)

TRAIN_OFFSET, SAMPLE_OFFSET, ORACLE_OFFSET = 0, 10_000, 20_000

SAMPLE_HEADER = ("x", "y", "class", "w", "sampler", "steps", "seed")


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def substream_key(*parts) -> int:
    """Stable 63-bit id for a tuple of labels (used to separate oracle draws)."""
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


# -- models -------------------------------------------------------------------

def training_key(config: RunConfig, loss_mode: str, w_train: float, seed: int) -> dict:
    tc = config.train_config(loss_mode, w_train if loss_mode == "updated" else 0.0, seed + TRAIN_OFFSET)
    return {
        "schedule": {k: v for k, v in config.values.items() if k.startswith("schedule.")},
        "model": {**asdict(config.model_config()), "hidden": list(config["model.hidden"])},
        "mixture": config.mixture().to_dict(),
        "train": asdict(tc),
    }


def checkpoint_path(config: RunConfig, loss_mode: str, w_train: float, seed: int, model_dir=None):
    """``(path, training digest, training key)`` for a model."""
    key = training_key(config, loss_mode, w_train, seed)
    digest = digest_of(key)
    model_dir = Path(model_dir or config.out_dir / "models")
    return model_dir / f"{loss_mode}_w{fmt(key['train']['w_train'])}_seed{seed}_{digest[:12]}.json", digest, key


def get_model(config: RunConfig, loss_mode: str, w_train: float, seed: int, model_dir=None) -> Denoiser:
    """Train (or load a cached) denoiser; the cache is keyed by the training digest."""
    path, digest, key = checkpoint_path(config, loss_mode, w_train, seed, model_dir)
    if path.exists():
        model, _, doc = load_checkpoint(path)
        if doc["config_digest"] == digest:
            return model
    tc = config.train_config(loss_mode, key["train"]["w_train"], seed + TRAIN_OFFSET)
    spec, schedule = config.mixture(), config.schedule()

    def batches(stream, n):
        s = sample_mixture(spec, n, stream)
        return s.points, s.labels

    model = init_denoiser(config.model_config(), RandomStream(tc.seed, substream=0))
    log.info("training %s w=%g seed=%d for %d steps", loss_mode, tc.w_train, seed, tc.steps)
    model, losses = train(model, batches, tc, schedule)
    path.parent.mkdir(parents=True, exist_ok=True)
    tail = float(losses[-100:].mean()) if losses.size else float("nan")
    save_checkpoint(model, config.model_config(), path, digest, meta={"train": key["train"], "final_loss": tail})
    return model


# -- evaluation ---------------------------------------------------------------

_ORACLE_CACHE: dict = {}


class Evaluator:
    """Oracle references, noise floors and metric evaluation for one experiment seed."""

    def __init__(self, config: RunConfig, seed: int):
        self.config = config
        self.seed = seed
        self.spec = config.mixture()
        self.n = config["eval.n_samples"]
        self.metric_name = config["eval.metric"]
        self._base = (digest_of(self.spec.to_dict()), self.n, self.metric_name, config["eval.n_proj"],
                      config["eval.floor_reps"], seed)

    def oracle(self, c: int, w: float, rep: int = 0) -> SampleSet:
        stream = RandomStream(self.seed + ORACLE_OFFSET, substream=substream_key("oracle", c, float(w), rep))
        return tilted_target_sample(self.spec, c, w, self.n, stream)

    def _reference(self, c: int, w: float):
        key = self._base + (c, float(w))
        if key not in _ORACLE_CACHE:
            ref = self.oracle(c, w).points
            self_term = mean_pairwise_distance(ref, ref) if self.metric_name == "energy" else None
            entry = {"ref": ref, "self": self_term}
            reps = [self.metric(self.oracle(c, w, r).points, c, w, entry) for r in range(1, self.config["eval.floor_reps"] + 1)]
            entry["floor"] = float(np.mean(reps))
            _ORACLE_CACHE[key] = entry
        return _ORACLE_CACHE[key]

    def metric(self, points: np.ndarray, c: int, w: float, entry=None) -> float:
        entry = entry or self._reference(c, w)
        if self.metric_name == "energy":
            value = energy_distance(points, entry["ref"], self_terms=(None, entry["self"]))
        else:
            stream = RandomStream(self.seed + ORACLE_OFFSET, substream=substream_key("proj", c, float(w)))
            value = sliced_wasserstein(points, entry["ref"], self.config["eval.n_proj"], stream)
        if not math.isfinite(value):
            raise NumericError(f"non-finite metric for class {c}, w={w}")
        return value

    def noise_floor(self, c: int, w: float) -> float:
        return self._reference(c, w)["floor"]

    def score(self, points: np.ndarray, c: int, w: float) -> tuple[float, float]:
        if not np.all(np.isfinite(points)):
            raise NumericError(f"sampler produced non-finite points (class {c}, w={w})")
        return self.metric(points, c, w), self.noise_floor(c, w)


def draw(config: RunConfig, model: Denoiser, w: float, c: int, seed: int, kind=None, n_steps=None) -> np.ndarray:
    sc = config.sampler_config(w, c, seed + SAMPLE_OFFSET, kind=kind, n_steps=n_steps)
    return generate(model, None, sc, config.schedule())


# -- reports ------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    experiment: str
    loss_mode: str
    w_train: float
    w_sample: float
    sampler: str
    n_steps: int
    seed: int
    cls: int
    metric: str
    value: float
    noise_floor: float
    relative: float = float("nan")

    def __post_init__(self):
        if not (math.isfinite(self.value) and math.isfinite(self.noise_floor)):
            raise NumericError("report cells must be finite")

    @property
    def ratio(self) -> float:
        return self.value / self.noise_floor if self.noise_floor > 0 else float("inf")


REPORT_HEADER = ("experiment", "loss_mode", "w_train", "w_sample", "sampler", "n_steps", "seed", "class",
                 "metric", "value", "noise_floor", "ratio", "relative", "config_digest")


def _cell_row(cell: Cell, digest: str) -> list[str]:
    rel = "" if math.isnan(cell.relative) else fmt(cell.relative)
    return [cell.experiment, cell.loss_mode, fmt(cell.w_train), fmt(cell.w_sample), cell.sampler,
            str(cell.n_steps), str(cell.seed), str(cell.cls), cell.metric, fmt(cell.value),
            fmt(cell.noise_floor), fmt(cell.ratio), rel, digest]


@dataclass
class RunReport:
    cells: list
    config_digest: str

    def rows(self, **match) -> list[Cell]:
        out = self.cells
        for name, value in match.items():
            out = [c for c in out if getattr(c, name) == value]
        return out

    def per_seed(self, **match) -> dict[int, tuple[float, float]]:
        """Class-averaged ``(value, noise_floor)`` per seed for the matching cells."""
        out: dict[int, list] = {}
        for c in self.rows(**match):
            out.setdefault(c.seed, []).append((c.value, c.noise_floor))
        return {s: tuple(np.mean(v, axis=0)) for s, v in sorted(out.items())}


class ReportWriter:
    """Writes whole rows and flushes after each batch; never leaves a torn row."""

    def __init__(self, path: Path, digest: str):
        self.path, self.digest = Path(path), digest
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._write([REPORT_HEADER])

    def _write(self, rows):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        self._fh.write(buf.getvalue())
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def add(self, cells: list[Cell]):
        self._write([_cell_row(c, self.digest) for c in cells])

    def close(self):
        self._fh.close()


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _run_seeds(config: RunConfig, job, seeds, path: Path, model_dir) -> tuple[RunReport, list]:
    """Run ``job(config_values, seed, model_dir)`` per seed and stream rows to ``path`` in seed order."""
    digest = config.digest
    writer = ReportWriter(path, digest)
    cells, extras = [], []
    args = [(dict(config.values), s, str(model_dir) if model_dir else None) for s in seeds]
    try:
        workers = min(config["run.workers"], len(seeds))
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                results = pool.map(job, *zip(*args))
                for seed_cells, extra in results:
                    writer.add(seed_cells)
                    cells += seed_cells
                    extras.append(extra)
        else:
            for a in args:
                seed_cells, extra = job(*a)
                writer.add(seed_cells)
                cells += seed_cells
                extras.append(extra)
    finally:
        writer.close()
    return RunReport(cells, digest), extras


# -- experiments --------------------------------------------------------------

def _toy_job(values: dict, seed: int, model_dir):
    config = RunConfig.from_flat(values)
    ev = Evaluator(config, seed)
    kind, steps = config["sampler.kind"], config["sampler.n_steps"]
    cells, panels = [], {}
    for mode in ("standard", "updated"):
        w_train = config["train.w_train"]
        model = get_model(config, mode, w_train, seed, model_dir)
        for w in config["eval.w_sample"]:
            for c in config["eval.classes"]:
                pts = draw(config, model, w, c, seed)
                value, floor = ev.score(pts, c, w)
                cells.append(Cell("toy", mode, w_train if mode == "updated" else 0.0, w, kind, steps, seed, c,
                                  config["eval.metric"], value, floor))
                panels[(mode, w, c)] = pts[: config["plot.max_points"]]
    for w in config["eval.w_sample"]:
        for c in config["eval.classes"]:
            panels[("target", w, c)] = ev.oracle(c, w).points[: config["plot.max_points"]]
    return cells, (seed, panels)


def run_toy_comparison(config: RunConfig, model_dir=None) -> RunReport:
    """Standard vs Updated models at every configured w, against the tilted oracle."""
    out = config.out_dir
    report, extras = _run_seeds(config, _toy_job, config["eval.seeds"], out / "toy_report.csv", model_dir)
    _, panels = extras[0]
    kind, steps = config["sampler.kind"], config["sampler.n_steps"]
    for mode in ("target", "standard", "updated"):
        for w in config["eval.w_sample"]:
            sets = [(SampleSet(panels[(mode, w, c)], np.full(len(panels[(mode, w, c)]), c)), f"class {c}")
                    for c in config["eval.classes"]]
            stem = f"toy_{mode}_w{fmt(w)}"
            title = f"{mode} w={w:g} (seed {extras[0][0]})"
            emit_scatter_svg(sets, out / f"{stem}.svg", config.digest, title)
            write_samples_csv(out / f"{stem}.csv", [(s, w, kind if mode != "target" else "oracle",
                                                     steps if mode != "target" else 0, extras[0][0]) for s, _ in sets],
                              config.digest)
    return report


def _ablation_job(values: dict, seed: int, model_dir):
    config = RunConfig.from_flat(values)
    ev = Evaluator(config, seed)
    kind, steps = config["sampler.kind"], config["sampler.n_steps"]
    cells = []
    for w_train in config["ablation.w_train"]:
        model = get_model(config, "updated", w_train, seed, model_dir)
        for w in config["ablation.w_sample"]:
            for c in config["eval.classes"]:
                value, floor = ev.score(draw(config, model, w, c, seed), c, w)
                cells.append(Cell("ablation", "updated", w_train, w, kind, steps, seed, c,
                                  config["eval.metric"], value, floor))
    return cells, None


def run_ablation_grid(config: RunConfig, w_train=None, w_sample=None, model_dir=None) -> RunReport:
    """One Updated model per ``w_train``, each sampled at every ``w_sample``."""
    changes = {}
    if w_train is not None:
        changes["ablation.w_train"] = list(w_train)
    if w_sample is not None:
        changes["ablation.w_sample"] = list(w_sample)
    config = config.replace(**changes) if changes else config
    report, _ = _run_seeds(config, _ablation_job, config["eval.seeds"], config.out_dir / "ablation_report.csv", model_dir)
    write_ablation_matrix(report, config, config.out_dir / "ablation_matrix.csv")
    return report


def ablation_matrix(report: RunReport, config: RunConfig, seed: int) -> np.ndarray:
    """``[|w_train|, |w_sample|]`` class-averaged metric for one seed."""
    wt, ws = config["ablation.w_train"], config["ablation.w_sample"]
    m = np.empty((len(wt), len(ws)))
    for i, a in enumerate(wt):
        for j, b in enumerate(ws):
            m[i, j] = np.mean([c.value for c in report.rows(seed=seed, w_train=a, w_sample=b)])
    return m


def write_ablation_matrix(report: RunReport, config: RunConfig, path: Path):
    ws = config["ablation.w_sample"]
    rows = [["seed", "w_train"] + [f"w_sample={fmt(w)}" for w in ws] + ["config_digest"]]
    for seed in config["eval.seeds"]:
        m = ablation_matrix(report, config, seed)
        for a, row in zip(config["ablation.w_train"], m):
            rows.append([str(seed), fmt(a)] + [fmt(v) for v in row] + [report.config_digest])
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    Path(path).write_text(buf.getvalue())


def _sweep_job(values: dict, seed: int, model_dir):
    config = RunConfig.from_flat(values)
    ev = Evaluator(config, seed)
    T, w = config["schedule.T"], config["eval.sweep_w"]
    steps = sorted(set(config["eval.steps"]) | {T}, reverse=True)
    cells = []
    for mode in ("standard", "updated"):
        w_train = config["train.w_train"]
        model = get_model(config, mode, w_train, seed, model_dir)
        for c in config["eval.classes"]:
            ref = None
            for n in steps:
                value, floor = ev.score(draw(config, model, w, c, seed, kind="ddim", n_steps=n), c, w)
                ref = value if n == T else ref
                cells.append(Cell("steps", mode, w_train if mode == "updated" else 0.0, w, "ddim", n, seed, c,
                                  config["eval.metric"], value, floor, value / ref if ref > 0 else float("inf")))
    return cells, None


def run_steps_sweep(config: RunConfig, steps=None, model_dir=None) -> RunReport:
    """DDIM metric against step count at fixed ``eval.sweep_w``; ``relative`` is value / value at T."""
    if steps is not None:
        config = config.replace(**{"eval.steps": list(steps)})
    report, _ = _run_seeds(config, _sweep_job, config["eval.seeds"], config.out_dir / "steps_report.csv", model_dir)
    return report


# -- samples CSV ----------------------------------------------------------------

def write_samples_csv(path, blocks, digest: str = ""):
    """``blocks``: iterable of ``(SampleSet, w, sampler, steps, seed)``."""
    buf = io.StringIO()
    buf.write(f"# config_digest={digest}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(SAMPLE_HEADER)
    for s, w, sampler, steps, seed in blocks:
        for (x, y), c in zip(s.points, s.labels):
            wr.writerow([fmt(x), fmt(y), int(c), fmt(w), sampler, int(steps), int(seed)])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def read_samples_csv(path) -> tuple[list[dict], str]:
    """Returns ``(rows, digest)``; ``x``/``y``/``w`` parsed as floats, ``class``/``steps``/``seed`` as ints."""
    lines = Path(path).read_text().splitlines()
    digest = ""
    while lines and lines[0].startswith("#"):
        head = lines.pop(0)[1:].strip()
        if head.startswith("config_digest="):
            digest = head.split("=", 1)[1]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != SAMPLE_HEADER:
        raise ConfigError(f"{path}: expected header {','.join(SAMPLE_HEADER)}")
    rows = []
    for r in reader:
        try:
            rows.append({"x": float(r["x"]), "y": float(r["y"]), "class": int(r["class"]), "w": float(r["w"]),
                         "sampler": r["sampler"], "steps": int(r["steps"]), "seed": int(r["seed"])})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: malformed row {r}") from exc
    return rows, digest


# -- SVG ----------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")


def _num(x: float) -> str:
    return format(float(x), ".6g")


def emit_scatter_svg(sets, path, digest: str = "", title: str | None = None):
    """Scatter plot of ``[(SampleSet | array, label), ...]``; one colour per distinct label."""
    if not sets:
        raise ConfigError("nothing to plot")
    pts = [np.asarray(s.points if isinstance(s, SampleSet) else s, dtype=np.float64).reshape(-1, 2) for s, _ in sets]
    allpts = np.concatenate(pts)
    if allpts.size == 0 or not np.all(np.isfinite(allpts)):
        raise ConfigError("plot needs finite, non-empty point sets")
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    lo, hi = lo - 0.1 * span, hi + 0.1 * span
    width, height = hi - lo
    size = max(width, height)
    r, font = 0.004 * size, 0.03 * size
    # SVG y grows downwards, so data y is negated.
    vb = f"{_num(lo[0])} {_num(-hi[1])} {_num(width)} {_num(height)}"
    colours: dict[str, str] = {}
    for _, label in sets:
        colours.setdefault(str(label), PALETTE[len(colours) % len(PALETTE)])
    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{vb}" width="600" height="{_num(600 * height / width)}">',
           f"<desc>config_digest={escape(digest)}</desc>"]
    if title:
        out.append(f"<title>{escape(title)}</title>")
    out.append(f'<rect x="{_num(lo[0])}" y="{_num(-hi[1])}" width="{_num(width)}" height="{_num(height)}" fill="white"/>')
    for p, (_, label) in zip(pts, sets):
        out.append(f"<g fill={quoteattr(colours[str(label)])} fill-opacity=\"0.6\">")
        out += [f'<circle cx="{_num(x)}" cy="{_num(-y)}" r="{_num(r)}"/>' for x, y in p]
        out.append("</g>")
    out.append(f'<g font-family="sans-serif" font-size="{_num(font)}">')
    for i, (label, colour) in enumerate(colours.items()):
        y = -hi[1] + font * (1.5 + 1.4 * i)
        x = lo[0] + font
        out.append(f'<rect x="{_num(x)}" y="{_num(y - 0.8 * font)}" width="{_num(0.8 * font)}" '
                   f'height="{_num(0.8 * font)}" fill={quoteattr(colour)}/>')
        out.append(f'<text x="{_num(x + 1.2 * font)}" y="{_num(y)}">{escape(label)}</text>')
    out += ["</g>", "</svg>"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n")
    return path

