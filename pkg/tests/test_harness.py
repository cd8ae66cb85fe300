import csv
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from cfglab import harness
from cfglab.cli import main
from cfglab.config import DEFAULTS, RunConfig, dump_config, load_config, parse_config
from cfglab.errors import ConfigError, NumericError
from cfglab.evaldata import SampleSet

TINY = {
    "train.steps": 60,
    "model.hidden": [16],
    "eval.n_samples": 200,
    "eval.w_sample": [0.0, 2.0],
    "eval.seeds": [0, 1],
    "eval.classes": [0, 2],
    "eval.steps": [2, 10],
    "eval.floor_reps": 2,
    "ablation.w_train": [1.0, 2.0],
    "ablation.w_sample": [1.0, 2.0],
    "sampler.kind": "ddim",
    "sampler.n_steps": 10,
    "plot.max_points": 40,
}


def tiny(tmp_path, **extra):
    return RunConfig.from_flat({**TINY, "run.out_dir": str(tmp_path), **extra})


# -- config ---------------------------------------------------------------------

def test_defaults_roundtrip_through_file(tmp_path):
    cfg = RunConfig.from_flat()
    path = tmp_path / "c.toml"
    path.write_text(dump_config(cfg))
    again = load_config(path)
    assert again.values == cfg.values
    assert again.digest == cfg.digest


def test_dotted_and_table_forms_agree():
    a = parse_config("train.lr = 0.001\neval.seeds = [1, 2]\n")
    b = parse_config("[train]\nlr = 0.001\n[eval]\nseeds = [1, 2]\n")
    assert a.digest == b.digest


def test_digest_ignores_output_location_and_workers():
    a = RunConfig.from_flat({"run.out_dir": "x", "run.workers": 1})
    b = RunConfig.from_flat({"run.out_dir": "y", "run.workers": 4})
    assert a.digest == b.digest
    assert RunConfig.from_flat({"train.lr": 1e-3}).digest != a.digest


def test_int_for_float_key_is_the_same_config():
    assert parse_config("mixture.radius = 2").digest == parse_config("mixture.radius = 2.0").digest


@pytest.mark.parametrize("text", [
    "train.bogus = 1",
    "train.steps = 1.5",
    "train.steps = true",
    "model.hidden = []",
    "sampler.kind = \"ddpm\"\nsampler.n_steps = 10",
    "eval.metric = \"mmd\"",
    "eval.classes = [3]",
    "eval.seeds = [1, 1]",
    "eval.steps = [0]",
    "train.lr = -1.0",
    "eval.w_sample = [-1.0]",
    "this is not toml",
])
def test_bad_configs_are_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_dump_lists_every_key():
    text = dump_config(RunConfig.from_flat())
    assert [line.split(" = ")[0] for line in text.splitlines() if line] == list(DEFAULTS)


def test_standard_checkpoint_key_ignores_w_train(tmp_path):
    cfg = tiny(tmp_path)
    assert harness.training_key(cfg, "standard", 1.0, 0) == harness.training_key(cfg, "standard", 3.0, 0)
    assert harness.training_key(cfg, "updated", 1.0, 0) != harness.training_key(cfg, "updated", 3.0, 0)


# -- samples CSV ----------------------------------------------------------------

def test_samples_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(25, 2)) * 1e3
    path = tmp_path / "s.csv"
    harness.write_samples_csv(path, [(SampleSet(pts, np.full(25, 1)), 1.8, "ddim", 10, 4)], "abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_digest=abc"
    assert lines[1] == "x,y,class,w,sampler,steps,seed"
    rows, digest = harness.read_samples_csv(path)
    assert digest == "abc"
    back = np.array([[r["x"], r["y"]] for r in rows])
    assert back.tobytes() == pts.tobytes()
    assert {(r["class"], r["w"], r["sampler"], r["steps"], r["seed"]) for r in rows} == {(1, 1.8, "ddim", 10, 4)}


def test_samples_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        harness.read_samples_csv(path)


# -- SVG ------------------------------------------------------------------------

def _sets():
    rng = np.random.default_rng(1)
    return [(rng.normal(size=(30, 2)), "class 0"), (rng.normal(size=(12, 2)) + 3, "a <b> & 'c'")]


def test_svg_deterministic_and_well_formed(tmp_path):
    a = harness.emit_scatter_svg(_sets(), tmp_path / "a.svg", "d1", "t")
    b = harness.emit_scatter_svg(_sets(), tmp_path / "b.svg", "d1", "t")
    assert a.read_bytes() == b.read_bytes()
    root = ET.parse(a).getroot()
    ns = "{http://www.w3.org/2000/svg}"
    assert len(root.findall(f".//{ns}circle")) == 42
    texts = [t.text for t in root.iter(f"{ns}text")]
    assert texts == ["class 0", "a <b> & 'c'"]
    assert "config_digest=d1" in root.find(f"{ns}desc").text


def test_svg_viewbox_margin(tmp_path):
    pts = np.array([[0.0, 0.0], [10.0, 5.0]])
    path = harness.emit_scatter_svg([(pts, "p")], tmp_path / "m.svg")
    vb = [float(v) for v in ET.parse(path).getroot().get("viewBox").split()]
    assert vb == pytest.approx([-1.0, -5.5, 12.0, 6.0])


def test_svg_one_colour_per_label(tmp_path):
    pts = np.zeros((3, 2)) + np.arange(3)[:, None]
    path = harness.emit_scatter_svg([(pts, "x"), (pts + 1, "y"), (pts + 2, "x")], tmp_path / "c.svg")
    root = ET.parse(path).getroot()
    fills = [g.get("fill") for g in root if g.tag.endswith("g") and g.get("fill")]
    assert fills[0] == fills[2] != fills[1]


def test_svg_errors(tmp_path):
    with pytest.raises(ConfigError):
        harness.emit_scatter_svg([], tmp_path / "e.svg")
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        harness.emit_scatter_svg(_sets(), blocker / "x.svg")


# -- experiments ------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    cfg = RunConfig.from_flat({**TINY, "run.out_dir": str(out)})
    return cfg, harness.run_toy_comparison(cfg), out


def test_toy_cell_count_and_sign(toy_run):
    cfg, report, _ = toy_run
    assert len(report.cells) == 2 * 2 * 2 * 2
    assert all(c.value >= 0 and c.noise_floor > 0 for c in report.cells)
    assert report.config_digest == cfg.digest


def test_toy_outputs_carry_digest(toy_run):
    cfg, _, out = toy_run
    rows = harness.read_report(out / "toy_report.csv")
    assert {r["config_digest"] for r in rows} == {cfg.digest}
    assert [int(r["seed"]) for r in rows] == sorted(int(r["seed"]) for r in rows)
    for svg in out.glob("*.svg"):
        assert cfg.digest in svg.read_text()
    for model in (out / "models").glob("*.json"):
        assert '"config_digest"' in model.read_text()


def test_toy_rerun_is_bitwise_identical(toy_run, tmp_path):
    cfg, _, out = toy_run
    again = cfg.replace(**{"run.out_dir": str(tmp_path), "run.workers": 2})
    harness.run_toy_comparison(again)
    produced = sorted(p.name for p in out.glob("*.csv"))
    assert produced and produced == sorted(p.name for p in tmp_path.glob("*.csv"))
    for name in produced:
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name
    for name in (p.name for p in out.glob("*.svg")):
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_ablation_shares_updated_cells_with_toy(toy_run):
    cfg, toy, out = toy_run
    ab = harness.run_ablation_grid(cfg, model_dir=out / "models")
    assert len(ab.cells) == 2 * 2 * 2 * 2
    for seed in cfg["eval.seeds"]:
        assert harness.ablation_matrix(ab, cfg, seed).shape == (2, 2)
        for c in cfg["eval.classes"]:
            a = ab.rows(seed=seed, w_train=1.0, w_sample=2.0, cls=c)[0]
            b = toy.rows(seed=seed, loss_mode="updated", w_sample=2.0, cls=c)[0]
            assert (a.value, a.noise_floor) == (b.value, b.noise_floor)
    with open(out / "ablation_matrix.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 2 * 2


def test_steps_sweep_relative_to_full_length(toy_run):
    cfg, _, out = toy_run
    rep = harness.run_steps_sweep(cfg, [2, 10], model_dir=out / "models")
    T = cfg["schedule.T"]
    assert {c.n_steps for c in rep.cells} == {2, 10, T}
    assert all(math.isfinite(c.value) and math.isfinite(c.relative) for c in rep.cells)
    assert all(c.relative == 1.0 for c in rep.cells if c.n_steps == T)


def test_crash_leaves_valid_partial_report(toy_run, tmp_path, monkeypatch):
    cfg, _, out = toy_run
    real = harness.Evaluator.score

    def failing(self, points, c, w):
        if self.seed == 1:
            raise NumericError("diverged")
        return real(self, points, c, w)

    monkeypatch.setattr(harness.Evaluator, "score", failing)
    with pytest.raises(NumericError):
        harness.run_toy_comparison(cfg.replace(**{"run.out_dir": str(tmp_path)}), model_dir=out / "models")
    text = (tmp_path / "toy_report.csv").read_text()
    assert text.endswith("\n")
    rows = harness.read_report(tmp_path / "toy_report.csv")
    assert len(rows) == 8 and {r["seed"] for r in rows} == {"0"}


# -- CLI --------------------------------------------------------------------------

@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(dump_config(tiny(tmp_path / "out")))
    return path


def test_cli_pipeline(tiny_file, tmp_path, capsys):
    out = tmp_path / "cli"
    common = ["--config", str(tiny_file), "--out", str(out), "--seed", "3"]
    assert main(["train", *common, "--mode", "updated"]) == 0
    ckpt = capsys.readouterr().out.strip()
    assert main(["sample", ckpt, *common, "--w", "2", "--class", "1"]) == 0
    samples = capsys.readouterr().out.strip()
    rows, digest = harness.read_samples_csv(samples)
    assert len(rows) == 200
    assert digest == load_config(tiny_file).replace(**{"eval.seeds": [3]}).digest
    assert main(["eval", samples, *common]) == 0
    assert '"noise_floor"' in capsys.readouterr().out
    assert main(["eval", samples, samples, *common]) == 0
    assert '"value": 0.0' in capsys.readouterr().out
    assert main(["plot", samples, *common]) == 0
    svg = capsys.readouterr().out.strip()
    assert len(ET.parse(svg).getroot().findall(".//{http://www.w3.org/2000/svg}circle")) == 200


def test_cli_output_dir_from_environment(tiny_file, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CFGLAB_OUT", str(tmp_path / "env"))
    assert main(["train", "--config", str(tiny_file), "--seed", "0", "--mode", "standard"]) == 0
    assert capsys.readouterr().out.startswith(str(tmp_path / "env"))


def test_cli_exit_codes(tiny_file, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("train.nope = 1\n")
    assert main(["toy", "--config", str(bad)]) == 2
    assert main(["toy", "--config", str(tmp_path / "missing.toml")]) == 4
    nan_csv = tmp_path / "nan.csv"
    nan_csv.write_text("x,y,class,w,sampler,steps,seed\nnan,0,0,1,ddim,10,0\n1,1,0,1,ddim,10,0\n")
    assert main(["eval", str(nan_csv), "--config", str(tiny_file)]) == 3
    assert main(["sample", str(tmp_path / "none.json"), "--config", str(tiny_file)]) == 4
