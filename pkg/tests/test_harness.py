import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msgaze import gazenet, harness
from msgaze.errors import ProtocolError, TrainingError
from msgaze.gazenet import GazeTrainConfig
from msgaze.harness import DatasetIndex, EvalReport, FoldPlan

subject_sets = st.lists(st.text("abcdefghij", min_size=1, max_size=3), min_size=2, max_size=40, unique=True)


def _check_partition(plan, subjects):
    tests = [s for _, t in plan.folds for s in t]
    assert sorted(tests) == sorted(subjects)
    for train, test in plan.folds:
        assert not set(train) & set(test)
        assert set(train) | set(test) == set(subjects)


@settings(max_examples=60, deadline=None)
@given(subject_sets)
def test_loso_partition(subjects):
    plan = harness.split_loso(subjects)
    assert len(plan.folds) == len(subjects)
    assert all(len(t) == 1 for _, t in plan.folds)
    _check_partition(plan, subjects)


@settings(max_examples=60, deadline=None)
@given(subject_sets, st.integers(2, 10), st.integers(0, 1000))
def test_kfold_partition(subjects, k, seed):
    if k > len(subjects):
        with pytest.raises(ProtocolError):
            harness.split_kfold_subjects(subjects, k, seed)
        return
    plan = harness.split_kfold_subjects(subjects, k, seed)
    sizes = [len(t) for _, t in plan.folds]
    assert max(sizes) - min(sizes) <= 1 and len(sizes) == k
    _check_partition(plan, subjects)
    assert plan.folds == harness.split_kfold_subjects(subjects, k, seed).folds


def test_kfold_size_patterns():
    s14 = [f"p{i:02d}" for i in range(14)]
    s50 = [f"p{i:02d}" for i in range(50)]
    assert sorted((len(t) for _, t in harness.split_kfold_subjects(s14, 5, 0).folds), reverse=True) == [3, 3, 3, 3, 2]
    assert sorted((len(t) for _, t in harness.split_kfold_subjects(s50, 3, 0).folds), reverse=True) == [17, 17, 16]
    assert len(harness.split_loso([f"p{i}" for i in range(15)]).folds) == 15


def test_loso_example_and_errors():
    plan = harness.split_loso(["A", "B", "C"])
    assert plan.folds[0] == (("B", "C"), ("A",))
    with pytest.raises(ProtocolError):
        harness.split_loso(["A"])
    with pytest.raises(ProtocolError):
        FoldPlan([(("A",), ("A", "B"))], "kfold").validate(["A", "B"])


def test_index_validation(tiny_dataset):
    idx = DatasetIndex.from_manifest(tiny_dataset)
    assert idx.source == "synthetic" and len(idx.subjects()) == 6
    with pytest.raises(ProtocolError):
        DatasetIndex([{"id": "a", "subject": "x"}, {"id": "a", "subject": "y"}])
    with pytest.raises(ProtocolError):
        DatasetIndex([{"id": "a", "subject": ""}])


def _row(i, fold, err, noise=1.0, gt=(0.0, 0.0), pred=(0.0, 0.0)):
    return {"id": str(i), "subject": f"s{fold}", "fold": fold, "pitch_pred": pred[0], "yaw_pred": pred[1],
            "pitch_gt": gt[0], "yaw_gt": gt[1], "error_deg": err, "noise_var": noise}


def test_report_aggregates():
    rows = [_row(0, 0, 5.0), _row(1, 1, 6.0), _row(2, 2, 7.0)]
    r = EvalReport(rows)
    assert r.mean_error() == 6.0
    assert r.fold_std() == pytest.approx(math.sqrt(2 / 3))
    assert r.aggregates()["mean_of_fold_means"] == 6.0
    assert not r.partial


def test_report_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    rows = [_row(i, i % 3, float(rng.random() * 10), float(rng.random())) for i in range(10)]
    r = EvalReport(rows, config_hash="abc", failed_folds=[{"fold": 4, "error": "x"}])
    r.to_csv(tmp_path / "r.csv")
    back = EvalReport.from_csv(tmp_path / "r.csv")
    assert back.rows == rows
    assert back.mean_error() == r.mean_error()
    assert back.config_hash == "abc" and back.partial


def test_robustness_curve_consistency(tmp_path):
    rng = np.random.default_rng(1)
    rows = [_row(i, 0, float(rng.random() * 10), float(rng.random() * 50)) for i in range(200)]
    r = EvalReport(rows)
    table = harness.robustness_curve(r, 10, out_csv=tmp_path / "c.csv", out_png=tmp_path / "c.png")
    assert sum(t["count"] for t in table) == 200 and len(table) == 10
    noise = np.array([x["noise_var"] for x in rows])
    err = r.errors()
    for t in table:
        last = t["bin"] == len(table) - 1
        sel = (noise >= t["lo"]) & ((noise <= t["hi"]) if last else (noise < t["hi"]))
        assert t["count"] == sel.sum()
        assert t["mean_error_deg"] == pytest.approx(err[sel].mean(), rel=1e-12)
    assert (tmp_path / "c.csv").exists() and (tmp_path / "c.png").exists()


def test_robustness_single_bin_and_empty():
    r = EvalReport([_row(i, 0, float(i), 3.0) for i in range(5)])
    table = harness.robustness_curve(r, 10)
    assert len(table) == 1 and table[0]["count"] == 5 and table[0]["mean_error_deg"] == 2.0
    with pytest.raises(ProtocolError):
        harness.robustness_curve(EvalReport([]), 10)


def test_heatmaps(tmp_path):
    rng = np.random.default_rng(2)
    gts = rng.uniform(-0.5, 0.5, (50, 2))
    r = EvalReport([_row(i, 0, 0.0, gt=tuple(g), pred=tuple(g)) for i, g in enumerate(gts)])
    res = harness.heatmap_export(r, tmp_path / "hm.png", bins=12)
    for axis in ("pitch", "yaw"):
        c = res["counts"][axis]
        assert c.sum() == 50
        assert c.sum() == np.trace(c)  # perfect predictions sit on the diagonal
        assert res["paths"][axis].exists()
    one = harness.gaze_histograms(EvalReport([_row(0, 0, 0.0, gt=(0.1, 0.2), pred=(0.3, -0.1))]))
    assert all(np.count_nonzero(c) == 1 for c, _ in one.values())


def test_arrow_overlay(tmp_path):
    imgs = np.full((3, 36, 60), 128, np.uint8)
    p = harness.arrow_overlay(imgs, np.zeros((3, 2)), tmp_path / "a.png", gt=np.zeros((3, 2)))
    assert p.exists()


def test_inject_noise_shapes(tiny_dataset):
    d = harness.DatasetIndex.from_manifest(tiny_dataset).load()
    noisy = harness.inject_noise(d, [0, 4, 8], seed=1)
    assert len(noisy) == 3 * len(d)
    np.testing.assert_array_equal(noisy.images[: len(d)], d.images)


FAST = GazeTrainConfig(widen_factor=1, epochs=1, max_steps=2, seed=0)


def test_run_protocol_smoke(tiny_dataset, tiny_aeri):
    idx = DatasetIndex.from_manifest(tiny_dataset)
    plan = harness.split_kfold_subjects(idx, 3, seed=0)
    rep = harness.run_protocol(idx, plan, FAST, tiny_aeri)
    assert len(rep.fold_means()) == 3 and len(rep.rows) == len(idx)
    assert np.isfinite(rep.errors()).all()
    assert rep.mean_error() == pytest.approx(np.mean([r["error_deg"] for r in rep.rows]), abs=1e-9)


def test_run_protocol_partial(tiny_dataset, tiny_aeri, monkeypatch):
    idx = DatasetIndex.from_manifest(tiny_dataset)
    plan = harness.split_kfold_subjects(idx, 3, seed=0)
    real = gazenet.train_gaze
    calls = []

    def flaky(*a, **kw):
        calls.append(1)
        if len(calls) == 2:
            raise TrainingError("non-finite loss")
        return real(*a, **kw)

    monkeypatch.setattr(gazenet, "train_gaze", flaky)
    rep = harness.run_protocol(idx, plan, FAST, tiny_aeri)
    assert rep.partial and rep.failed_folds[0]["fold"] == 1
    assert sorted(rep.fold_means()) == [0, 2]


def test_ablation_single_kind_matches_protocol(tiny_dataset, tiny_aeri, tmp_path):
    idx = DatasetIndex.from_manifest(tiny_dataset)
    plan = harness.split_kfold_subjects(idx, 2, seed=0)
    table = harness.ablation_suite(idx, plan, ["full"], FAST, tiny_aeri, out_csv=tmp_path / "t.csv")
    rep = harness.run_protocol(idx, plan, FAST, tiny_aeri)
    assert len(table) == 1 and table[0]["mean_error_deg"] == rep.mean_error()
    assert (tmp_path / "t.csv").exists()
