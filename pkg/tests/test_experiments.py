import csv

import numpy as np
import pytest

from cellattn import datagen, experiments
from cellattn.datagen import write_idx
from cellattn.experiments import (DecayResult, ExperimentError, ExperimentReport, ExperimentSpec, _row,
                                  box_offtask_window, finish, run)
from cellattn.saliency import read_pgm
from cellattn.training import TrainConfig


def tiny_spec(tmp_path, suite="static-box", datasets=("earlier",), models=("lstm", "lstm-incell"), **kw):
    base = dict(seeds=(0, 1), n_train=40, n_test=20, hidden=4, d_a=3, hops=2, heatmaps=2,
                train=TrainConfig(max_epochs=1, batch_size=16))
    return ExperimentSpec(suite=suite, models=models, datasets=datasets, output_dir=tmp_path / "out",
                          **(base | kw))


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("kw, message", [
    (dict(datasets=()), "dataset"),
    (dict(models=()), "model"),
    (dict(seeds=()), "seed"),
    (dict(suite="bogus"), "suite"),
    (dict(models=("gru",)), "model name"),
    (dict(datasets=("diagonal",)), "kind"),
    (dict(suite="feature-drop", percents=(0.0,)), "percents"),
    (dict(suite="mnist"), "IDX"),
])
def test_invalid_specs_fail_before_any_output(tmp_path, kw, message):
    spec = tiny_spec(tmp_path, **kw)
    with pytest.raises(ValueError, match=message):
        run(spec)
    assert not spec.output_dir.exists()


def test_static_box_report_and_heatmaps(tmp_path):
    spec = tiny_spec(tmp_path, datasets=("earlier", "three-latter"))
    report = run(spec)
    assert len(report.rows) == 2 * 2 * 2
    assert {(r["dataset"], r["model"], r["seed"]) for r in report.rows} == {
        (d, m, s) for d in spec.datasets for m in spec.models for s in spec.seeds}
    rows = read_rows(spec.output_dir / "report.csv")
    assert list(rows[0]) == list(experiments.REPORT_COLUMNS)
    assert sum(r["seed"] == "median" for r in rows) == 4
    # every heatmap on disk has an index row and vice versa
    index = read_rows(spec.output_dir / "heatmaps" / "index.csv")
    on_disk = {p.relative_to(spec.output_dir).as_posix() for p in (spec.output_dir / "heatmaps").rglob("*.pgm")}
    assert on_disk == {r["path"] for r in index} and on_disk
    for r in index:
        assert r["seed"] == "0" and r["correct"] == "1"
        assert read_pgm(spec.output_dir / r["path"]).shape == (100, 100)


def test_rerun_is_byte_identical_and_worker_count_free(tmp_path):
    a = tiny_spec(tmp_path / "a")
    b = tiny_spec(tmp_path / "b", workers=2)
    run(a)
    run(b)
    for name in ("report.csv", "heatmaps/index.csv"):
        assert (a.output_dir / name).read_bytes() == (b.output_dir / name).read_bytes()


def test_cache_hit_skips_training(tmp_path, monkeypatch):
    spec = tiny_spec(tmp_path, models=("lstm",), seeds=(0,))
    first = run(spec)
    monkeypatch.setattr(experiments, "train", lambda *a, **k: pytest.fail("retrained a cached cell"))
    spec2 = tiny_spec(tmp_path / "again", models=("lstm",), seeds=(0,), cache_dir=spec.cache)
    second = run(spec2)
    assert first.rows == second.rows


def test_reports_are_append_only(tmp_path):
    spec = tiny_spec(tmp_path, models=("lstm",), seeds=(0,))
    run(spec)
    once = (spec.output_dir / "report.csv").read_text().splitlines()
    run(spec)
    twice = (spec.output_dir / "report.csv").read_text().splitlines()
    assert twice == once + once[1:]


def test_single_start_moving_box_is_a_static_box_run(tmp_path):
    moving = run(tiny_spec(tmp_path / "m", suite="moving-box", datasets=("moving(40)",)))
    static = run(tiny_spec(tmp_path / "s", datasets=("moving(40)",)))
    strip = lambda rows: [{k: v for k, v in r.items() if k != "suite"} for r in rows]
    assert strip(moving.rows) == strip(static.rows)
    curve = moving.curves["lstm"]
    assert len(curve) == 1 and curve[0][0] == 40
    assert (tmp_path / "m" / "out" / "moving_lstm.csv").exists()


def test_moving_box_rejects_static_kinds(tmp_path):
    with pytest.raises(ValueError, match="moving"):
        run(tiny_spec(tmp_path, suite="moving-box", datasets=("earlier",)))


def test_decay_suite_writes_profiles(tmp_path):
    report = run(tiny_spec(tmp_path, suite="decay"))
    for name in ("lstm", "lstm-incell"):
        res = report.curves[("earlier", name)]
        assert res.profile.shape == (100,) and (res.profile >= 0).all()
        rows = read_rows(tmp_path / "out" / f"decay_{name}.csv")
        assert len(rows) == 100 and list(rows[0]) == ["t", "g"]


def test_empty_cells_are_flagged_not_fatal(tmp_path):
    spec = tiny_spec(tmp_path)
    report = ExperimentReport(rows=[_row("decay", "earlier", "lstm", 0, acc=0.0, status="empty"),
                                    _row("decay", "earlier", "lstm", 1, acc=0.6, wjac=0.1, euc=1.0, n_correct=12)])
    finish(spec, report, [])
    assert any("no correctly classified" in f for f in report.flagged)
    med = [r for r in read_rows(spec.output_dir / "report.csv") if r["seed"] == "median"][0]
    assert med["wjac"] == "0.100000" and med["status"] == "ok"
    empty = DecayResult("lstm", "earlier", np.zeros(5), 0, empty=True)
    assert np.isnan(empty.half_ratio()) and np.isnan(empty.last_quarter_mass())


def test_divergence_is_reported_with_partial_rows(tmp_path):
    spec = tiny_spec(tmp_path, models=("lstm",), seeds=(0,),
                     train=TrainConfig(optimizer="sgd", learning_rate=1e200, precision="float32", max_epochs=2))
    with pytest.raises(ExperimentError, match="diverged"):
        run(spec)
    rows = read_rows(spec.output_dir / "report.csv")
    assert rows[0]["status"] == "diverged"


def test_feature_drop_conditions(tmp_path):
    spec = tiny_spec(tmp_path, suite="feature-drop", seeds=(0,), percents=(10.0, 100.0))
    report = run(spec)
    for name, other in (("lstm", "lstm-incell"), ("lstm-incell", "lstm")):
        for cond, source in (("self", name), ("random", "random"), ("cross", other)):
            curve = report.curves[("earlier", name, 0, cond, source)]
            assert [p for p, _ in curve] == [0.0, 10.0, 100.0]
        base = report.curves[("earlier", name, 0, "self", name)][0][1]
        row = [r for r in report.rows if r["model"] == name][0]
        assert base == pytest.approx(row["acc"])
        # dropping every cell leaves identical all-zero inputs: one class for all
        assert report.curves[("earlier", name, 0, "self", name)][-1][1] == pytest.approx(0.5)
    rows = read_rows(tmp_path / "out" / "drop_lstm.csv")
    assert {r["condition"] for r in rows} == {"self", "random", "cross"}


def test_mnist_suite_on_synthetic_idx(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.array([1, 6, 7, 3] * 10, dtype=np.uint8)
    images = rng.integers(0, 256, size=(40, 28, 28), dtype=np.uint8)
    for name, arr in (("img", images), ("lbl", labels)):
        write_idx(tmp_path / name, arr)
    pair = (str(tmp_path / "img"), str(tmp_path / "lbl"))
    spec = tiny_spec(tmp_path, suite="mnist", datasets=(), seeds=(0,), mnist_train=pair, mnist_test=pair)
    report = run(spec)
    assert all(r["dataset"] == "mnist167" for r in report.rows)
    for name in spec.models:
        assert {d for (m, _, d) in report.curves if m == name} == set(datagen.MNIST_DIGITS)
    for path in (tmp_path / "out" / "heatmaps").rglob("*.pgm"):
        assert read_pgm(path).shape == (28, 28)


def test_offtask_window():
    assert box_offtask_window("earlier", 100) == (30, 100)
    assert box_offtask_window("three-middle", 100) == (70, 100)
    assert box_offtask_window("latter", 100) is None
    assert box_offtask_window("mixed", 100) is None
