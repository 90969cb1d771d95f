"""Preprocessing, classifiers, ensembles, feature importance and feature refinement.

Illicit is the positive class throughout.  Models see a binary target
(illicit = 1, licit = 0); rows of unknown class are dropped by
:func:`temporal_split` unless asked otherwise.
"""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit
from sklearn.ensemble import RandomForestClassifier

from .core import ClassLabel, ForensicsError
from .ingest import ADDRESS, AUGMENTED_COLUMNS, CLASS, TIME_STEP, TX_ID, DatasetBundle

WORKERS_ENV = "CHAINFORENSICS_WORKERS"
MODEL_FORMAT = "chainforensics-model"
MODEL_VERSION = 1

ILLICIT = int(ClassLabel.ILLICIT)
LICIT = int(ClassLabel.LICIT)


class EmptyFit(ForensicsError):
    pass


class SingleClassTrainingSet(ForensicsError):
    pass


class WrongModelKind(ForensicsError):
    pass


class FeatureMismatch(ForensicsError):
    pass


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


# -- feature matrices -------------------------------------------------------------------

@dataclass
class FeatureMatrix:
    ids: np.ndarray
    columns: list[str]
    values: np.ndarray
    labels: np.ndarray
    time_steps: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=object)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.ids), len(self.columns))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.time_steps = np.asarray(self.time_steps, dtype=np.int64)
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("duplicate column names")
        if not (len(self.labels) == len(self.time_steps) == len(self.ids)):
            raise ValueError("ids, labels and time steps must align")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def y(self) -> np.ndarray:
        """Binary target: 1 for illicit rows, 0 otherwise."""
        return (self.labels == ILLICIT).astype(np.int64)

    def rows(self, mask) -> "FeatureMatrix":
        return FeatureMatrix(self.ids[mask], list(self.columns), self.values[mask], self.labels[mask], self.time_steps[mask])

    def with_columns(self, columns: Sequence[str]) -> "FeatureMatrix":
        idx = [self.columns.index(c) for c in columns]
        return FeatureMatrix(self.ids, list(columns), self.values[:, idx], self.labels, self.time_steps)

    def without(self, column: str) -> "FeatureMatrix":
        return self.with_columns([c for c in self.columns if c != column])

    def with_values(self, values: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(self.ids, list(self.columns), values, self.labels, self.time_steps)


FEATURE_SETS = ("all", "legacy", "augmented")


def tx_matrix(bundle: DatasetBundle, feature_set: str = "all") -> FeatureMatrix:
    """Transaction rows; ``legacy`` keeps only inherited columns, ``augmented`` only the 17 added ones."""
    frame = bundle.tx_frame()
    cols = bundle.tx_feature_columns
    if feature_set == "augmented":
        cols = [c for c in cols if c in AUGMENTED_COLUMNS]
    elif feature_set == "legacy":
        cols = [c for c in cols if c not in AUGMENTED_COLUMNS]
    elif feature_set != "all":
        raise ValueError(f"feature_set must be one of {FEATURE_SETS}")
    values = np.nan_to_num(frame[cols].to_numpy(dtype=np.float64), nan=0.0)
    return FeatureMatrix(frame[TX_ID].to_numpy(), cols, values, frame[CLASS].to_numpy(), frame[TIME_STEP].to_numpy())


def wallet_matrix(bundle: DatasetBundle) -> FeatureMatrix:
    """Wallet occurrence rows labelled with the wallet class; the stored class column is not a feature."""
    frame = bundle.wallet_frame()
    cols = [c for c in bundle.wallet_feature_columns if c != CLASS]
    values = np.nan_to_num(frame[cols].to_numpy(dtype=np.float64), nan=0.0)
    ids = (frame[ADDRESS].astype(str) + "@" + frame[TIME_STEP].astype(str)).to_numpy()
    return FeatureMatrix(ids, cols, values, frame["label"].to_numpy(), frame[TIME_STEP].to_numpy())


# -- preprocessing ------------------------------------------------------------------------

@dataclass(frozen=True)
class MinMaxParams:
    columns: tuple[str, ...]
    mins: np.ndarray
    maxs: np.ndarray
    clamp: bool = False

    def transform(self, m: FeatureMatrix) -> FeatureMatrix:
        values = m.values.copy()
        for j, col in enumerate(self.columns):
            k = m.columns.index(col)
            span = self.maxs[j] - self.mins[j]
            if span > 0:
                values[:, k] = (values[:, k] - self.mins[j]) / span
            else:
                values[:, k] = 0.0
            if self.clamp:
                np.clip(values[:, k], 0.0, 1.0, out=values[:, k])
        return m.with_values(values)


def scale_min_max(
    m: FeatureMatrix,
    fit_rows=None,
    columns: Sequence[str] | None = None,
    clamp: bool = False,
) -> tuple[FeatureMatrix, MinMaxParams]:
    """Fit per-feature min/max on ``fit_rows`` (mask, indices or a FeatureMatrix) and rescale.

    Constant columns map to 0. Values outside the fit range are left outside
    [0, 1] unless ``clamp`` is set.
    """
    columns = list(m.columns if columns is None else columns)
    if isinstance(fit_rows, FeatureMatrix):
        fit = fit_rows
    else:
        fit = m if fit_rows is None else m.rows(fit_rows)
    if len(fit) == 0:
        raise EmptyFit("no rows to fit the scaler on")
    idx = [fit.columns.index(c) for c in columns]
    block = fit.values[:, idx]
    params = MinMaxParams(tuple(columns), block.min(axis=0), block.max(axis=0), clamp)
    return params.transform(m), params


@dataclass(frozen=True)
class SplitSpec:
    train_steps: tuple[int, int] = (1, 34)
    test_steps: tuple[int, int] = (35, 49)

    def __post_init__(self):
        (a, b), (c, d) = self.train_steps, self.test_steps
        if not (1 <= a <= b < c <= d):
            raise ValueError(f"train steps {self.train_steps} must precede test steps {self.test_steps}")

    @classmethod
    def parse(cls, train: str, test: str) -> "SplitSpec":
        def rng(text):
            lo, _, hi = text.partition("-")
            return int(lo), int(hi or lo)

        return cls(rng(train), rng(test))


def temporal_split(m: FeatureMatrix, spec: SplitSpec = SplitSpec(), known_only: bool = True) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Partition rows by time step; unknown-class rows are dropped when ``known_only``."""
    keep = np.isin(m.labels, (ILLICIT, LICIT)) if known_only else np.ones(len(m), dtype=bool)
    (a, b), (c, d) = spec.train_steps, spec.test_steps
    train = keep & (m.time_steps >= a) & (m.time_steps <= b)
    test = keep & (m.time_steps >= c) & (m.time_steps <= d)
    return m.rows(train), m.rows(test)


def prepare(
    m: FeatureMatrix,
    spec: SplitSpec = SplitSpec(),
    scale_columns: Sequence[str] | None = None,
) -> tuple[FeatureMatrix, FeatureMatrix, MinMaxParams]:
    """Split, then min-max scale with the scaler fit on training rows only."""
    train, test = temporal_split(m, spec)
    train_s, params = scale_min_max(train, columns=scale_columns)
    return train_s, params.transform(test), params


# -- models ------------------------------------------------------------------------------------

LOGISTIC = "logistic_regression"
FOREST = "random_forest"


@dataclass
class TrainedModel:
    kind: str
    feature_names: list[str]
    seed: int
    config: dict
    estimator: object = None  # RandomForestClassifier for forests
    coef: np.ndarray | None = None  # logistic weights, intercept last
    loss_history: list[float] = field(default_factory=list)

    def _check(self, m: FeatureMatrix) -> np.ndarray:
        if list(m.columns) != list(self.feature_names):
            raise FeatureMismatch(f"model expects {len(self.feature_names)} named features, matrix has {len(m.columns)}")
        return m.values

    @property
    def n_estimators(self) -> int:
        if self.kind != FOREST:
            raise WrongModelKind("only forests have trees")
        return len(self.estimator.estimators_)

    def tree_vote_matrix(self, m: FeatureMatrix) -> np.ndarray:
        """(rows, trees) boolean array: does each tree vote illicit."""
        if self.kind != FOREST:
            raise WrongModelKind("tree votes need a random forest")
        x = self._check(m).astype(np.float32)
        positive = list(self.estimator.classes_).index(1)
        return np.column_stack([t.predict_proba(x).argmax(axis=1) == positive for t in self.estimator.estimators_])

    def illicit_score(self, m: FeatureMatrix) -> np.ndarray:
        """Share of trees voting illicit (forests) or predicted probability (logistic)."""
        if self.kind == FOREST:
            return self.tree_vote_matrix(m).mean(axis=1)
        x = self._check(m)
        return expit(x @ self.coef[:-1] + self.coef[-1])

    def predict_illicit(self, m: FeatureMatrix) -> np.ndarray:
        if self.kind == FOREST:
            votes = self.tree_vote_matrix(m).sum(axis=1)
            return 2 * votes > self.n_estimators
        return self.illicit_score(m) > 0.5

    def predict(self, m: FeatureMatrix) -> np.ndarray:
        """Class codes (1 illicit, 2 licit)."""
        return np.where(self.predict_illicit(m), ILLICIT, LICIT)


def _require_both_classes(m: FeatureMatrix) -> np.ndarray:
    y = m.y
    if len(y) == 0 or y.min() == y.max():
        raise SingleClassTrainingSet("training rows must contain both illicit and licit examples")
    return y


def train_logistic(
    train: FeatureMatrix,
    max_iterations: int = 1000,
    l2_strength: float = 1.0,
    tolerance: float = 1e-6,
    seed: int = 0,
) -> TrainedModel:
    """L2-regularised logistic regression fit with L-BFGS.

    Objective: summed log loss + l2_strength/2 * ||w||^2 (intercept unpenalised),
    the same objective as scikit-learn's default with C = 1/l2_strength.
    The objective value after every iteration is kept in ``loss_history``.
    """
    y = _require_both_classes(train).astype(np.float64)
    x = train.values
    n, d = x.shape
    sign = 2.0 * y - 1.0

    def objective(theta):
        w, b = theta[:-1], theta[-1]
        z = x @ w + b
        loss = -np.sum(log_expit(sign * z)) + 0.5 * l2_strength * (w @ w)
        r = expit(z) - y
        grad = np.empty_like(theta)
        grad[:-1] = x.T @ r + l2_strength * w
        grad[-1] = r.sum()
        return loss, grad

    theta0 = np.zeros(d + 1)
    history = [objective(theta0)[0]]
    res = minimize(
        objective,
        theta0,
        jac=True,
        method="L-BFGS-B",
        callback=lambda xk: history.append(objective(xk)[0]),
        options={"maxiter": max_iterations, "gtol": tolerance, "ftol": 1e-12},
    )
    return TrainedModel(
        kind=LOGISTIC,
        feature_names=list(train.columns),
        seed=seed,
        config={"max_iterations": max_iterations, "l2_strength": l2_strength, "tolerance": tolerance,
                "iterations": int(res.nit), "converged": bool(res.success)},
        coef=res.x,
        loss_history=history,
    )


def train_random_forest(
    train: FeatureMatrix,
    estimators: int = 50,
    seed: int = 0,
    max_features: str | int | float = "sqrt",
    bootstrap: bool = True,
    criterion: str = "gini",
    min_samples_leaf: int = 1,
    workers: int | None = None,
) -> TrainedModel:
    """Random forest with library-default growth (unlimited depth, leaf size 1).

    Trees draw their randomness from ``seed`` alone, so results do not depend
    on ``workers``.
    """
    y = _require_both_classes(train)
    forest = RandomForestClassifier(
        n_estimators=estimators,
        criterion=criterion,
        max_features=max_features,
        bootstrap=bootstrap,
        min_samples_leaf=min_samples_leaf,
        random_state=seed,
        n_jobs=workers or worker_count(),
    )
    forest.fit(train.values, y)
    return TrainedModel(
        kind=FOREST,
        feature_names=list(train.columns),
        seed=seed,
        config={"estimators": estimators, "max_features": max_features, "bootstrap": bootstrap,
                "criterion": criterion, "min_samples_leaf": min_samples_leaf},
        estimator=forest,
    )


def tree_votes(model: TrainedModel, m: FeatureMatrix, row: int = 0) -> np.ndarray:
    """Running count of trees voting illicit for one row, in tree order."""
    votes = model.tree_vote_matrix(m.rows(slice(row, row + 1)))[0]
    return np.cumsum(votes.astype(np.int64))


# -- ensembles -------------------------------------------------------------------------------

ENSEMBLE_RULES = ("conjunction", "majority", "disjunction")


@dataclass
class EnsembleSpec:
    members: list[TrainedModel]
    rule: str = "conjunction"
    name: str = ""

    def __post_init__(self):
        if not 2 <= len(self.members) <= 3:
            raise ValueError("an ensemble has 2 or 3 members")
        if self.rule not in ENSEMBLE_RULES:
            raise ValueError(f"rule must be one of {ENSEMBLE_RULES}")
        names = self.members[0].feature_names
        if any(mem.feature_names != names for mem in self.members[1:]):
            raise FeatureMismatch("ensemble members were trained on different features")


def ensemble_vote(member_votes: np.ndarray, rule: str = "conjunction") -> np.ndarray:
    """Combine a (rows, members) boolean illicit-vote array."""
    member_votes = np.asarray(member_votes, dtype=bool)
    if rule == "conjunction":
        return member_votes.all(axis=1)
    if rule == "disjunction":
        return member_votes.any(axis=1)
    if rule == "majority":
        return 2 * member_votes.sum(axis=1) > member_votes.shape[1]
    raise ValueError(f"rule must be one of {ENSEMBLE_RULES}")


def ensemble_predict(spec: EnsembleSpec, m: FeatureMatrix) -> np.ndarray:
    votes = np.column_stack([mem.predict_illicit(m) for mem in spec.members])
    return np.where(ensemble_vote(votes, spec.rule), ILLICIT, LICIT)


# -- importance ----------------------------------------------------------------------------

def f1_illicit(pred_illicit: np.ndarray, y: np.ndarray) -> float:
    pred_illicit = np.asarray(pred_illicit, dtype=bool)
    y = np.asarray(y, dtype=bool)
    tp = int(np.sum(pred_illicit & y))
    denom = 2 * tp + int(np.sum(pred_illicit & ~y)) + int(np.sum(~pred_illicit & y))
    return 2 * tp / denom if denom else 0.0


def _ranks(scores: np.ndarray) -> np.ndarray:
    """1 = most important; ties keep column order."""
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(1, len(scores) + 1)
    return ranks


def _normalized(scores: np.ndarray) -> np.ndarray:
    s = np.clip(scores, 0.0, None)
    total = s.sum()
    return s / total if total > 0 else np.zeros_like(s)


@dataclass
class ImportanceReport:
    columns: list[str]
    impurity: np.ndarray | None
    permutation: np.ndarray
    drop_column: np.ndarray | None
    combined_rank: np.ndarray  # 1 = most important
    combined_score: np.ndarray  # non-negative, sums to 1 unless every method is all-zero

    def order(self) -> list[str]:
        return [self.columns[i] for i in np.argsort(self.combined_rank, kind="stable")]

    def top(self, k: int) -> list[str]:
        return self.order()[:k]

    def as_rows(self) -> list[dict]:
        rows = []
        for i, c in enumerate(self.columns):
            rows.append({
                "feature": c,
                "impurity": float(self.impurity[i]) if self.impurity is not None else float("nan"),
                "permutation": float(self.permutation[i]),
                "drop_column": float(self.drop_column[i]) if self.drop_column is not None else float("nan"),
                "combined_score": float(self.combined_score[i]),
                "combined_rank": int(self.combined_rank[i]),
            })
        return sorted(rows, key=lambda r: r["combined_rank"])


def _retrain_like(model: TrainedModel, train: FeatureMatrix) -> TrainedModel:
    if model.kind == FOREST:
        cfg = {k: v for k, v in model.config.items()}
        return train_random_forest(train, seed=model.seed, **cfg)
    cfg = {k: model.config[k] for k in ("max_iterations", "l2_strength", "tolerance")}
    return train_logistic(train, seed=model.seed, **cfg)


def permutation_importance(model: TrainedModel, validation: FeatureMatrix, repeats: int = 5, seed: int = 0) -> np.ndarray:
    """Mean drop in illicit F1 when one column is shuffled, per column."""
    y = validation.y
    base = f1_illicit(model.predict_illicit(validation), y)
    out = np.zeros(len(validation.columns))
    for j in range(len(validation.columns)):
        # one stream per column so columns can be scored in any order
        rng = np.random.default_rng([seed, j])
        drops = []
        for _ in range(repeats):
            values = validation.values.copy()
            values[:, j] = rng.permutation(values[:, j])
            drops.append(base - f1_illicit(model.predict_illicit(validation.with_values(values)), y))
        out[j] = float(np.mean(drops))
    return out


def drop_column_importance(model: TrainedModel, train: FeatureMatrix, validation: FeatureMatrix) -> np.ndarray:
    """Drop in illicit F1 after retraining without each column."""
    y = validation.y
    base = f1_illicit(model.predict_illicit(validation), y)
    out = np.zeros(len(validation.columns))
    for j, col in enumerate(validation.columns):
        reduced = _retrain_like(model, train.without(col))
        out[j] = base - f1_illicit(reduced.predict_illicit(validation.without(col)), y)
    return out


def importance_report(
    model: TrainedModel,
    validation: FeatureMatrix,
    train: FeatureMatrix | None = None,
    permutation_repeats: int = 5,
    seed: int = 0,
    drop_column: bool = True,
) -> ImportanceReport:
    """Impurity, permutation and drop-column importance plus their combined ranking.

    Impurity scores exist only for forests. Drop-column scores need ``train``.
    The combined rank orders features by the mean of the per-method ranks.
    """
    columns = list(model.feature_names)
    if list(validation.columns) != columns:
        raise FeatureMismatch("validation matrix columns differ from the model's")
    impurity = None
    if model.kind == FOREST:
        impurity = np.asarray(model.estimator.feature_importances_, dtype=np.float64)
        if impurity.sum() > 0:
            impurity = impurity / impurity.sum()
    perm = permutation_importance(model, validation, permutation_repeats, seed)
    drop = drop_column_importance(model, train, validation) if (drop_column and train is not None) else None
    methods = [s for s in (impurity, perm, drop) if s is not None]
    mean_rank = np.mean([_ranks(s) for s in methods], axis=0)
    combined_rank = _ranks(-mean_rank)
    combined_score = np.mean([_normalized(s) for s in methods], axis=0)
    return ImportanceReport(columns, impurity, perm, drop, combined_rank, combined_score)


# -- refinement ------------------------------------------------------------------------------

@dataclass(frozen=True)
class RefinePolicy:
    kind: str = "cumulative"  # cumulative | top_k | drop_bottom
    value: float = 0.95

    @classmethod
    def parse(cls, text: str) -> "RefinePolicy":
        """``cumulative:0.95``, ``top_k:10`` or ``drop_bottom:0.2``."""
        kind, _, value = text.partition(":")
        if kind not in ("cumulative", "top_k", "drop_bottom"):
            raise ValueError(f"unknown refinement policy {text!r}")
        return cls(kind, float(value) if value else cls.value)

    def __str__(self) -> str:
        v = int(self.value) if self.kind == "top_k" else self.value
        return f"{self.kind}:{v}"


def select_features(report: ImportanceReport, policy: RefinePolicy) -> list[str]:
    """Columns kept by ``policy``, in their original order."""
    ordered = np.argsort(report.combined_rank, kind="stable")
    d = len(report.columns)
    if policy.kind == "top_k":
        keep = ordered[: min(d, int(policy.value))]
    elif policy.kind == "drop_bottom":
        keep = ordered[: d - int(np.floor(policy.value * d))]
    elif policy.value >= 1.0:
        keep = ordered
    else:
        cum = np.cumsum(report.combined_score[ordered])
        n = int(np.searchsorted(cum, policy.value - 1e-12)) + 1
        keep = ordered[: min(max(n, 1), d)]
    keep_set = set(int(i) for i in keep)
    return [c for i, c in enumerate(report.columns) if i in keep_set]


def refine_features(m: FeatureMatrix, report: ImportanceReport, policy: RefinePolicy) -> tuple[FeatureMatrix, list[str]]:
    if set(report.columns) - set(m.columns):
        raise FeatureMismatch("importance report names columns missing from the matrix")
    selected = select_features(report, policy)
    return m.with_columns(selected), selected


# -- persistence -------------------------------------------------------------------------------

def save_model(model: TrainedModel, path: str | Path) -> None:
    """Pickle with a self-describing header (format, version, kind, seed, config, features)."""
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": model.kind,
        "seed": model.seed,
        "config": model.config,
        "feature_names": model.feature_names,
        "coef": model.coef,
        "loss_history": model.loss_history,
        "estimator": model.estimator,
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=pickle.HIGHEST_PROTOCOL)


def load_model(path: str | Path) -> TrainedModel:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if not isinstance(payload, dict) or payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a saved model")
    if payload["version"] != MODEL_VERSION:
        raise ValueError(f"unsupported model version {payload['version']}")
    return TrainedModel(
        kind=payload["kind"],
        feature_names=payload["feature_names"],
        seed=payload["seed"],
        config=payload["config"],
        estimator=payload["estimator"],
        coef=payload["coef"],
        loss_history=payload["loss_history"],
    )


def prediction_rows(model_or_preds, m: FeatureMatrix) -> list[tuple]:
    """(id, true label, predicted label, illicit vote share) rows for csv export."""
    if isinstance(model_or_preds, TrainedModel):
        pred = model_or_preds.predict(m)
        share = model_or_preds.illicit_score(m)
    else:
        pred = np.asarray(model_or_preds)
        share = (pred == ILLICIT).astype(float)
    return [(str(i), int(t), int(p), float(s)) for i, t, p, s in zip(m.ids, m.labels, pred, share)]
