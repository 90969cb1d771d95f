"""Classification metrics, EASY/HARD/AVERAGE case breakdowns and the full report run."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .core import ClassLabel, ForensicsError, format_decimal
from .features import bundle_actor_timeline, feature_trend_series
from .ingest import AUGMENTED_COLUMNS, CLASS, FILES, DatasetBundle, distribution_report
from .ml import (
    ILLICIT,
    EnsembleSpec,
    FeatureMatrix,
    RefinePolicy,
    SplitSpec,
    TrainedModel,
    ensemble_predict,
    importance_report,
    prepare,
    refine_features,
    train_logistic,
    train_random_forest,
    tx_matrix,
    wallet_matrix,
)


class IdMismatch(ForensicsError):
    pass


class ModelCountTooSmall(ForensicsError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    micro_f1: float
    mcc: float
    # correct / total over both classes: what a two-class micro-averaged F1 reduces to
    accuracy: float


def _aligned(predictions, truth) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(predictions, Mapping) or isinstance(truth, Mapping):
        if not (isinstance(predictions, Mapping) and isinstance(truth, Mapping)):
            raise IdMismatch("pass both predictions and truth as id mappings, or both as sequences")
        if set(predictions) != set(truth):
            raise IdMismatch(f"{len(set(predictions) ^ set(truth))} ids appear on one side only")
        keys = list(truth)
        return np.array([int(predictions[k]) for k in keys]), np.array([int(truth[k]) for k in keys])
    p, t = np.asarray(predictions).astype(np.int64), np.asarray(truth).astype(np.int64)
    if p.shape != t.shape:
        raise IdMismatch(f"{len(p)} predictions for {len(t)} truth labels")
    return p, t


def confusion(predictions, truth) -> ConfusionCounts:
    """Confusion counts with illicit as the positive class.

    Accepts aligned sequences of class codes or two id -> code mappings.
    """
    p, t = _aligned(predictions, truth)
    pp, tp_ = p == ILLICIT, t == ILLICIT
    return ConfusionCounts(
        tp=int(np.sum(pp & tp_)),
        fp=int(np.sum(pp & ~tp_)),
        fn=int(np.sum(~pp & tp_)),
        tn=int(np.sum(~pp & ~tp_)),
    )


def metrics(c: ConfusionCounts) -> MetricsReport:
    """Precision, recall, F1, micro-F1 and MCC; any 0/0 evaluates to 0."""
    tp, fp, fn, tn = c.tp, c.fp, c.fn, c.tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    micro = tp / (tp + 0.5 * (fp + fn)) if tp + fp + fn else 0.0
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(denom) if denom else 0.0
    accuracy = (tp + tn) / c.total if c.total else 0.0
    return MetricsReport(precision, recall, f1, micro, mcc, accuracy)


# -- cases -----------------------------------------------------------------------------------

EASY, HARD, AVERAGE = "EASY", "HARD", "AVERAGE"


@dataclass
class CaseBreakdown:
    models: list[str]
    ids: np.ndarray
    time_steps: np.ndarray
    category: np.ndarray  # EASY / HARD / AVERAGE per illicit row
    correct: list[frozenset]  # models that got each row right
    totals: dict[str, int] = field(default_factory=dict)

    def by_time_step(self) -> pd.DataFrame:
        """Rows: EASY, HARD, then one AVERAGE row per correct-model subset. Columns: time steps."""
        steps = sorted({int(s) for s in self.time_steps})
        keys = [EASY, HARD]
        subsets = sorted({",".join(sorted(c)) for c, cat in zip(self.correct, self.category) if cat == AVERAGE},
                         key=lambda s: (s.count(","), s))
        keys += [f"{AVERAGE}:{s}" for s in subsets]
        table = pd.DataFrame(0, index=keys, columns=steps, dtype=np.int64)
        for step, cat, corr in zip(self.time_steps, self.category, self.correct):
            key = cat if cat != AVERAGE else f"{AVERAGE}:{','.join(sorted(corr))}"
            table.loc[key, int(step)] += 1
        table["total"] = table.sum(axis=1)
        table.index.name = "case"
        return table


def categorize_cases(
    predictions: Mapping[str, Sequence[int]],
    truth: Sequence[int],
    time_steps: Sequence[int],
    ids: Sequence | None = None,
) -> CaseBreakdown:
    """Split the illicit rows into EASY (all models right), HARD (all wrong) and AVERAGE."""
    if len(predictions) < 2:
        raise ModelCountTooSmall(f"need at least 2 models, got {len(predictions)}")
    truth = np.asarray(truth, dtype=np.int64)
    steps = np.asarray(time_steps, dtype=np.int64)
    names = list(predictions)
    preds = {}
    for name in names:
        p = np.asarray(predictions[name], dtype=np.int64)
        if p.shape != truth.shape:
            raise IdMismatch(f"model {name} has {len(p)} predictions for {len(truth)} rows")
        preds[name] = p
    ids = np.arange(len(truth)) if ids is None else np.asarray(ids, dtype=object)
    mask = truth == ILLICIT
    rows = np.flatnonzero(mask)
    correct = [frozenset(n for n in names if preds[n][i] == ILLICIT) for i in rows]
    category = np.array(
        [EASY if len(c) == len(names) else HARD if not c else AVERAGE for c in correct], dtype=object
    )
    totals = {k: int(np.sum(category == k)) for k in (EASY, HARD, AVERAGE)}
    return CaseBreakdown(names, ids[rows], steps[rows], category, correct, totals)


# -- full run ----------------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    seed: int = 0
    estimators: int = 50
    split: SplitSpec = field(default_factory=SplitSpec)
    datasets: tuple[str, ...] = ("tx", "wallets")
    tx_feature_set: str = "all"
    ensembles: tuple[tuple[str, ...], ...] = (("RF", "LR"),)
    ensemble_rule: str = "conjunction"
    refine_policy: RefinePolicy = field(default_factory=RefinePolicy)
    permutation_repeats: int = 5
    drop_column: bool = True
    lr_max_iterations: int = 1000
    trend_features: Mapping[str, Sequence[str]] = field(
        default_factory=lambda: {"tx": ("fees", "size", "ADDR_out"), "wallets": ("addr_interactions_total", "fees_total")}
    )

    def as_dict(self) -> dict:
        d = asdict(self)
        d["split"] = {"train_steps": list(self.split.train_steps), "test_steps": list(self.split.test_steps)}
        d["refine_policy"] = str(self.refine_policy)
        d["datasets"] = list(self.datasets)
        d["ensembles"] = ["+".join(e) for e in self.ensembles]
        d["trend_features"] = {k: list(v) for k, v in self.trend_features.items()}
        return d


def bundle_digest(bundle: DatasetBundle) -> dict[str, str]:
    """sha256 of each table's canonical csv text."""
    out = {}
    for key, name in FILES.items():
        text = getattr(bundle, key).to_csv(index=False, float_format="%.8f", lineterminator="\n")
        out[name] = hashlib.sha256(text.encode()).hexdigest()
    return out


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else format_decimal(float(v), 8)
    return str(v)


def write_table(rows: Sequence[Mapping], path: Path, columns: Sequence[str] | None = None) -> None:
    """Deterministic csv: fixed column order, 8-decimal floats, \\n line endings."""
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(str(c) for c in columns) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[c]) for c in columns) + "\n")


def write_frame(frame: pd.DataFrame, path: Path) -> None:
    frame = frame.reset_index()
    write_table(frame.to_dict("records"), path, list(frame.columns))


def _metrics_row(dataset: str, model: str, variant: str, pred: np.ndarray, truth: np.ndarray, n_features: int) -> dict:
    c = confusion(pred, truth)
    m = metrics(c)
    return {"dataset": dataset, "model": model, "features": variant, "n_features": n_features,
            "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn, **asdict(m)}


@dataclass
class DatasetResult:
    train: FeatureMatrix
    test: FeatureMatrix
    models: dict[str, TrainedModel]
    predictions: dict[str, np.ndarray]
    metrics_rows: list[dict]
    importance: object
    selected: list[str]
    refined_models: dict[str, TrainedModel]
    cases: CaseBreakdown | None


def _fit_models(train: FeatureMatrix, cfg: PipelineConfig) -> dict[str, TrainedModel]:
    return {
        "LR": train_logistic(train, max_iterations=cfg.lr_max_iterations, seed=cfg.seed),
        "RF": train_random_forest(train, estimators=cfg.estimators, seed=cfg.seed),
    }


def _predict_all(models: dict[str, TrainedModel], test: FeatureMatrix, cfg: PipelineConfig) -> dict[str, np.ndarray]:
    preds = {name: m.predict(test) for name, m in models.items()}
    for members in cfg.ensembles:
        spec = EnsembleSpec([models[n] for n in members], cfg.ensemble_rule)
        preds["+".join(members)] = ensemble_predict(spec, test)
    return preds


def run_dataset(name: str, matrix: FeatureMatrix, cfg: PipelineConfig, scale_columns=None) -> DatasetResult:
    train, test, _ = prepare(matrix, cfg.split, scale_columns)
    models = _fit_models(train, cfg)
    preds = _predict_all(models, test, cfg)
    rows = [_metrics_row(name, m, "all", p, test.labels, len(train.columns)) for m, p in preds.items()]

    report = importance_report(models["RF"], test, train, cfg.permutation_repeats, cfg.seed, cfg.drop_column)
    train_r, selected = refine_features(train, report, cfg.refine_policy)
    test_r = test.with_columns(selected)
    refined = _fit_models(train_r, cfg)
    preds_r = _predict_all(refined, test_r, cfg)
    rows += [_metrics_row(name, m, "refined", p, test.labels, len(selected)) for m, p in preds_r.items()]

    cases = None
    if np.any(test.labels == ILLICIT):
        cases = categorize_cases({k: preds[k] for k in models}, test.labels, test.time_steps, test.ids)
    return DatasetResult(train, test, models, preds, rows, report, selected, refined, cases)


def refinement_deltas(rows: list[dict]) -> list[dict]:
    by_key = {(r["dataset"], r["model"], r["features"]): r for r in rows}
    out = []
    for (ds, model, variant), r in by_key.items():
        if variant != "all" or (ds, model, "refined") not in by_key:
            continue
        q = by_key[(ds, model, "refined")]
        out.append({"dataset": ds, "model": model,
                    **{f"delta_{k}": q[k] - r[k] for k in ("precision", "recall", "f1", "micro_f1", "mcc")}})
    return out


def evaluation_run(bundle: DatasetBundle, cfg: PipelineConfig, out_dir: str | Path) -> dict:
    """Run the whole experiment suite and write a report directory.

    Files: metrics.csv, refinement.csv, importance.csv, cases_by_timestep.csv,
    predictions.csv, distribution_tx.csv, distribution_wallets.csv,
    actors_by_timestep.csv, trend_<feature>.csv and manifest.json. Output bytes
    depend only on the bundle contents and ``cfg``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results: dict[str, DatasetResult] = {}
    for ds in cfg.datasets:
        if ds == "tx":
            m = tx_matrix(bundle, cfg.tx_feature_set)
            scale = [c for c in m.columns if c in AUGMENTED_COLUMNS]
        elif ds == "wallets":
            m = wallet_matrix(bundle)
            scale = None
        else:
            raise ValueError(f"unknown dataset {ds!r}")
        results[ds] = run_dataset(ds, m, cfg, scale)

    metric_rows = [r for res in results.values() for r in res.metrics_rows]
    write_table(metric_rows, out / "metrics.csv")
    write_table(refinement_deltas(metric_rows), out / "refinement.csv",
                ["dataset", "model", "delta_precision", "delta_recall", "delta_f1", "delta_micro_f1", "delta_mcc"])

    imp_rows = []
    for ds, res in results.items():
        for r in res.importance.as_rows():
            imp_rows.append({"dataset": ds, **r, "selected": r["feature"] in res.selected})
    write_table(imp_rows, out / "importance.csv",
                ["dataset", "feature", "impurity", "permutation", "drop_column", "combined_score", "combined_rank", "selected"])

    case_rows = []
    for ds, res in results.items():
        if res.cases is None:
            continue
        table = res.cases.by_time_step()
        for case, row in table.iterrows():
            for step, n in row.items():
                case_rows.append({"dataset": ds, "models": "+".join(res.cases.models), "case": case,
                                  "time_step": step, "count": int(n)})
    write_table(case_rows, out / "cases_by_timestep.csv", ["dataset", "models", "case", "time_step", "count"])

    pred_rows = []
    for ds, res in results.items():
        for model_name, model in res.models.items():
            share = model.illicit_score(res.test)
            for i, t, p, s in zip(res.test.ids, res.test.labels, res.predictions[model_name], share):
                pred_rows.append({"dataset": ds, "model": model_name, "id": i, "true_label": int(t),
                                  "predicted_label": int(p), "illicit_vote_share": float(s)})
    write_table(pred_rows, out / "predictions.csv",
                ["dataset", "model", "id", "true_label", "predicted_label", "illicit_vote_share"])

    n_steps = int(max(bundle.tx_features["Time step"].max() if len(bundle.tx_features) else 0, cfg.split.test_steps[1]))
    dist_tx, dist_w = distribution_report(bundle, n_steps)
    write_frame(dist_tx, out / "distribution_tx.csv")
    write_frame(dist_w, out / "distribution_wallets.csv")
    write_frame(bundle_actor_timeline(bundle, n_steps).table.rename_axis("steps_active"), out / "actors_by_timestep.csv")

    frames = {"tx": bundle.tx_frame(), "wallets": bundle.wallet_frame()}
    class_cols = {"tx": CLASS, "wallets": "label"}
    for ds, feats in cfg.trend_features.items():
        for feat in feats:
            if feat not in frames[ds].columns:
                continue
            series = {
                label.name.lower(): feature_trend_series(frames[ds], feat, label, class_cols[ds], n_steps)
                for label in (ClassLabel.ILLICIT, ClassLabel.LICIT)
            }
            write_frame(pd.DataFrame(series), out / f"trend_{feat}.csv")

    manifest = {
        "tool": "chainforensics",
        "version": __version__,
        "config": cfg.as_dict(),
        "seed": cfg.seed,
        "inputs": bundle_digest(bundle),
        "selected_features": {ds: res.selected for ds, res in results.items()},
        "case_totals": {ds: res.cases.totals for ds, res in results.items() if res.cases is not None},
    }
    with open(out / "manifest.json", "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"results": results, "manifest": manifest, "metrics": metric_rows}
