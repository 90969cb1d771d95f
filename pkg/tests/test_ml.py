import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from chainforensics.ml import (
    EmptyFit,
    EnsembleSpec,
    FeatureMatrix,
    FeatureMismatch,
    RefinePolicy,
    SingleClassTrainingSet,
    SplitSpec,
    WrongModelKind,
    ensemble_predict,
    ensemble_vote,
    importance_report,
    load_model,
    prepare,
    refine_features,
    save_model,
    scale_min_max,
    select_features,
    temporal_split,
    train_logistic,
    train_random_forest,
    tree_votes,
    tx_matrix,
    wallet_matrix,
)


def planted_matrix(n=600, d=6, seed=0, signal=(0,)):
    """Illicit rows shifted by 2 sd on the ``signal`` columns; the rest is noise."""
    rng = np.random.default_rng(seed)
    y = rng.random(n) < 0.4
    x = rng.normal(size=(n, d))
    for j in signal:
        x[:, j] += 2.0 * y
    labels = np.where(y, 1, 2)
    steps = rng.integers(1, 11, n)
    return FeatureMatrix([f"r{i}" for i in range(n)], [f"f{j}" for j in range(d)], x, labels, steps)


def test_min_max_fit_on_train_only():
    m = FeatureMatrix(["a", "b", "c"], ["x"], [[0.0], [10.0], [20.0]], [1, 2, 2], [1, 1, 2])
    scaled, params = scale_min_max(m, fit_rows=np.array([True, True, False]))
    assert scaled.values[:, 0].tolist() == [0.0, 1.0, 2.0]
    clamped, _ = scale_min_max(m, fit_rows=np.array([True, True, False]), clamp=True)
    assert clamped.values[2, 0] == 1.0
    with pytest.raises(EmptyFit):
        scale_min_max(m, fit_rows=np.zeros(3, dtype=bool))


def test_constant_column_maps_to_zero():
    m = FeatureMatrix(["a", "b"], ["x"], [[3.0], [3.0]], [1, 2], [1, 1])
    assert scale_min_max(m)[0].values.tolist() == [[0.0], [0.0]]


def test_split_partitions_steps():
    m = planted_matrix()
    spec = SplitSpec((1, 6), (7, 10))
    tr, te = temporal_split(m, spec)
    assert tr.time_steps.max() <= 6 and te.time_steps.min() >= 7
    assert len(tr) + len(te) == len(m)
    with pytest.raises(ValueError):
        SplitSpec((1, 10), (5, 12))
    assert SplitSpec.parse("1-34", "35-49") == SplitSpec()


def test_unknown_rows_dropped():
    m = FeatureMatrix(["a", "b", "c"], ["x"], [[0.0], [1.0], [2.0]], [1, 3, 2], [1, 1, 2])
    tr, te = temporal_split(m, SplitSpec((1, 1), (2, 2)))
    assert tr.ids.tolist() == ["a"] and te.ids.tolist() == ["c"]


def test_logistic_matches_library_objective():
    m = planted_matrix(n=400, d=4, seed=2, signal=(0, 1))
    model = train_logistic(m, tolerance=1e-10)
    ref = LogisticRegression(C=1.0, tol=1e-12, max_iter=10_000).fit(m.values, m.y)
    assert np.allclose(model.coef[:-1], ref.coef_[0], atol=1e-4)
    assert np.isclose(model.coef[-1], ref.intercept_[0], atol=1e-4)
    h = model.loss_history
    assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))


def test_single_class_refused():
    m = FeatureMatrix(["a", "b"], ["x"], [[0.0], [1.0]], [2, 2], [1, 1])
    with pytest.raises(SingleClassTrainingSet):
        train_random_forest(m)
    with pytest.raises(SingleClassTrainingSet):
        train_logistic(m)


def test_forest_is_seed_deterministic_across_workers():
    m = planted_matrix()
    a = train_random_forest(m, estimators=20, seed=4, workers=1)
    b = train_random_forest(m, estimators=20, seed=4, workers=2)
    assert np.array_equal(a.tree_vote_matrix(m), b.tree_vote_matrix(m))
    assert np.array_equal(a.estimator.feature_importances_, b.estimator.feature_importances_)


def test_tree_votes_agree_with_prediction():
    m = planted_matrix()
    rf = train_random_forest(m, estimators=15, seed=1)
    votes = rf.tree_vote_matrix(m)
    assert np.array_equal(rf.predict_illicit(m), 2 * votes.sum(axis=1) > 15)
    running = tree_votes(rf, m, row=3)
    assert running[-1] == votes[3].sum() and len(running) == 15
    with pytest.raises(WrongModelKind):
        train_logistic(m).tree_vote_matrix(m)


def test_feature_mismatch():
    m = planted_matrix()
    rf = train_random_forest(m, estimators=5)
    with pytest.raises(FeatureMismatch):
        rf.predict(m.without("f1"))


@settings(max_examples=200)
@given(st.lists(st.lists(st.booleans(), min_size=2, max_size=3), min_size=1, max_size=30).filter(
    lambda rows: len({len(r) for r in rows}) == 1))
def test_vote_rules(rows):
    v = np.array(rows)
    conj, maj, disj = (ensemble_vote(v, r) for r in ("conjunction", "majority", "disjunction"))
    assert (conj <= v.all(axis=1)).all() and (conj == v.all(axis=1)).all()
    assert (conj <= maj).all() and (maj <= disj).all()
    for k in range(v.shape[1]):
        assert (conj <= v[:, k]).all()


def test_conjunction_subset_of_members():
    m = planted_matrix(signal=(0, 1))
    lr, rf = train_logistic(m), train_random_forest(m, estimators=10)
    ens = ensemble_predict(EnsembleSpec([rf, lr]), m) == 1
    assert not (ens & ~rf.predict_illicit(m)).any()
    assert not (ens & ~lr.predict_illicit(m)).any()


def test_importance_finds_planted_feature():
    m = planted_matrix(n=800, d=6, seed=3, signal=(2,))
    tr, te = temporal_split(m, SplitSpec((1, 7), (8, 10)))
    rf = train_random_forest(tr, estimators=30, seed=0)
    rep = importance_report(rf, te, tr, permutation_repeats=3)
    assert rep.order()[0] == "f2"
    assert sorted(rep.combined_rank.tolist()) == list(range(1, 7))
    assert np.isclose(rep.combined_score.sum(), 1.0)


def test_permutation_importance_deterministic_and_zero_for_constant_column():
    m = planted_matrix(n=300, d=4, seed=8, signal=(1,))
    values = m.values.copy()
    values[:, 3] = 0.0  # shuffling a constant column changes nothing
    m = m.with_values(values)
    rf = train_random_forest(m, estimators=10)
    a = importance_report(rf, m, drop_column=False, seed=5).permutation
    b = importance_report(rf, m, drop_column=False, seed=5).permutation
    assert np.array_equal(a, b)
    assert a[3] == 0.0
    assert a.argmax() == 1


def test_refine_policies():
    m = planted_matrix(n=400, d=6, seed=3, signal=(2, 4))
    rf = train_random_forest(m, estimators=10)
    rep = importance_report(rf, m, m, permutation_repeats=2)
    assert len(select_features(rep, RefinePolicy("top_k", 2))) == 2
    assert len(select_features(rep, RefinePolicy("drop_bottom", 0.5))) == 3
    assert select_features(rep, RefinePolicy("cumulative", 1.0)) == m.columns
    kept = select_features(rep, RefinePolicy("cumulative", 0.5))
    order = rep.order()
    # the smallest prefix of the ranking whose normalized scores reach 0.5
    scores = dict(zip(rep.columns, rep.combined_score))
    prefix = np.cumsum([scores[c] for c in order])
    n = int(np.argmax(prefix >= 0.5 - 1e-12)) + 1
    assert set(kept) == set(order[:n])
    refined, cols = refine_features(m, rep, RefinePolicy("top_k", 2))
    assert refined.columns == cols and set(cols) == {"f2", "f4"}
    assert RefinePolicy.parse("top_k:10") == RefinePolicy("top_k", 10.0)
    assert str(RefinePolicy.parse("cumulative:0.9")) == "cumulative:0.9"
    with pytest.raises(ValueError):
        RefinePolicy.parse("best:3")


def test_save_load_round_trip(tmp_path):
    m = planted_matrix()
    for model in (train_random_forest(m, estimators=5, seed=2), train_logistic(m)):
        save_model(model, tmp_path / "m.pkl")
        back = load_model(tmp_path / "m.pkl")
        assert np.array_equal(back.predict(m), model.predict(m))
        assert back.kind == model.kind and back.config == model.config


def test_bundle_matrices(small_bundle):
    tx = tx_matrix(small_bundle)
    assert len(tx) == len(small_bundle.tx_features)
    assert tx_matrix(small_bundle, "augmented").values.shape[1] == 17
    w = wallet_matrix(small_bundle)
    assert "class" not in w.columns and w.values.shape[1] == 55
    tr, te, params = prepare(tx, SplitSpec((1, 4), (5, 6)))
    assert np.allclose(tr.values.min(axis=0)[tr.values.max(axis=0) > 0], 0.0)
