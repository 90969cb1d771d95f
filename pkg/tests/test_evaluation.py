import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chainforensics.evaluation import (
    AVERAGE,
    EASY,
    HARD,
    ConfusionCounts,
    IdMismatch,
    ModelCountTooSmall,
    PipelineConfig,
    categorize_cases,
    confusion,
    evaluation_run,
    metrics,
)
from chainforensics.ml import SplitSpec
from oracles import naive_metrics

counts = st.integers(0, 10**6)


@given(counts, counts, counts, counts)
def test_metrics_match_oracle(tp, fp, fn, tn):
    got = metrics(ConfusionCounts(tp, fp, fn, tn))
    exp = naive_metrics(tp, fp, fn, tn)
    for g, e in zip((got.precision, got.recall, got.f1, got.micro_f1, got.mcc), exp):
        assert abs(g - e) <= 1e-12


def test_mcc_extremes():
    assert metrics(ConfusionCounts(10, 0, 0, 90)).mcc == 1.0
    assert metrics(ConfusionCounts(0, 90, 10, 0)).mcc == -1.0


def test_all_zero_counts():
    m = metrics(ConfusionCounts(0, 0, 0, 0))
    assert (m.precision, m.recall, m.f1, m.micro_f1, m.mcc, m.accuracy) == (0.0,) * 6


def test_confusion_positive_is_illicit():
    c = confusion([1, 1, 2, 2, 1], [1, 2, 1, 2, 1])
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 1)
    assert metrics(c).accuracy == 3 / 5


def test_confusion_by_id():
    c = confusion({"a": 1, "b": 2}, {"b": 2, "a": 1})
    assert (c.tp, c.tn) == (1, 1)
    with pytest.raises(IdMismatch):
        confusion({"a": 1}, {"b": 1})
    with pytest.raises(IdMismatch):
        confusion([1, 2], [1])


def test_cases():
    truth = [1, 1, 1, 2, 1]
    steps = [1, 1, 2, 2, 3]
    preds = {"RF": [1, 2, 1, 1, 2], "LR": [1, 2, 2, 2, 2]}
    br = categorize_cases(preds, truth, steps, ids=list("abcde"))
    assert dict(zip(br.ids, br.category)) == {"a": EASY, "b": HARD, "c": AVERAGE, "e": HARD}
    assert br.totals == {EASY: 1, HARD: 2, AVERAGE: 1}
    table = br.by_time_step()
    assert table.loc[EASY, 1] == 1 and table.loc[HARD, "total"] == 2
    assert table.loc[f"{AVERAGE}:RF", 2] == 1
    with pytest.raises(ModelCountTooSmall):
        categorize_cases({"RF": [1]}, [1], [1])


def test_cases_partition_illicit_rows():
    rng = np.random.default_rng(0)
    truth = rng.choice([1, 2], 300)
    preds = {k: rng.choice([1, 2], 300) for k in ("RF", "LR", "X")}
    br = categorize_cases(preds, truth, rng.integers(1, 6, 300))
    assert sum(br.totals.values()) == int((truth == 1).sum())


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, small_bundle):
    out = tmp_path_factory.mktemp("eval")
    cfg = PipelineConfig(seed=1, estimators=10, split=SplitSpec((1, 4), (5, 6)), permutation_repeats=2)
    evaluation_run(small_bundle, cfg, out)
    return out, cfg


def test_report_files(run_dir):
    out, _ = run_dir
    names = {p.name for p in out.iterdir()}
    for required in ("metrics.csv", "refinement.csv", "importance.csv", "cases_by_timestep.csv", "predictions.csv",
                     "distribution_tx.csv", "distribution_wallets.csv", "actors_by_timestep.csv", "manifest.json"):
        assert required in names
    met = pd.read_csv(out / "metrics.csv")
    assert set(met["model"]) == {"RF", "LR", "RF+LR"}
    assert set(met["features"]) == {"all", "refined"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 1 and "txs_features.csv" in manifest["inputs"]


def test_ensemble_rows_never_beat_members_on_fp(run_dir):
    out, _ = run_dir
    met = pd.read_csv(out / "metrics.csv")
    for (ds, variant), g in met.groupby(["dataset", "features"]):
        fp = dict(zip(g["model"], g["fp"]))
        assert fp["RF+LR"] <= min(fp["RF"], fp["LR"])


def test_rerun_is_byte_identical(run_dir, small_bundle, tmp_path):
    out, cfg = run_dir
    evaluation_run(small_bundle, cfg, tmp_path)
    for p in out.iterdir():
        assert p.read_bytes() == (tmp_path / p.name).read_bytes(), p.name
