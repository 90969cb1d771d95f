"""Batch command line: ingest, extract, graphs, train, evaluate, cases, refine, synth.

Every command reads files, writes files into ``--output`` and finishes with a
``manifest.json`` recording the command, its configuration, the seed and the
sha256 of every input file. Equal manifests mean byte-identical outputs.
Worker count comes from the ``CHAINFORENSICS_WORKERS`` environment variable
and never changes results.

Exit codes: 0 success, 1 validation/data error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .core import ForensicsError, label_from_code
from .evaluation import PipelineConfig, categorize_cases, confusion, evaluation_run, metrics, write_frame, write_table
from .features import extract_bundle
from .graphs import build_all, user_stats, write_edge_list, write_graphml
from .ingest import AUGMENTED_COLUMNS, CLASS, TIME_STEP, TX_ID, distribution_report, load_bundle, read_raw_file, write_bundle, write_raw_transactions
from .ml import (
    RefinePolicy,
    SplitSpec,
    importance_report,
    prediction_rows,
    prepare,
    refine_features,
    save_model,
    train_logistic,
    train_random_forest,
    tx_matrix,
    wallet_matrix,
)
from .synth import ChainConfig, generate_chain

RAW_FILE = "transactions.jsonl"
META_FILE = "tx_meta.csv"
MODEL_NAMES = ("RF", "LR")


class UsageError(Exception):
    pass


# -- shared plumbing ------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def input_hashes(path: Path | None) -> dict[str, str]:
    if path is None:
        return {}
    if path.is_file():
        return {path.name: _sha256(path)}
    return {p.relative_to(path).as_posix(): _sha256(p) for p in sorted(path.rglob("*")) if p.is_file()}


def write_manifest(out: Path, command: str, config: dict, seed: int | None, inputs: Path | None, extra: dict | None = None) -> None:
    manifest = {
        "tool": "chainforensics",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": input_hashes(inputs),
    }
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _split(args) -> SplitSpec:
    try:
        return SplitSpec.parse(args.train_steps, args.test_steps)
    except ValueError as e:
        raise UsageError(str(e)) from e


def parse_ensembles(text: str) -> tuple[tuple[tuple[str, ...], ...], str]:
    """``RF+LR`` or ``RF+LR,RF:conjunction``; the optional rule applies to all ensembles."""
    body, _, rule = text.partition(":")
    rule = rule or "conjunction"
    if rule not in ("conjunction", "majority", "disjunction"):
        raise UsageError(f"unknown ensemble rule {rule!r}")
    groups = []
    for part in body.split(","):
        members = tuple(m.strip().upper() for m in part.split("+") if m.strip())
        if not members or any(m not in MODEL_NAMES for m in members):
            raise UsageError(f"ensemble members must be drawn from {MODEL_NAMES}, got {part!r}")
        groups.append(members)
    return tuple(groups), rule


def pipeline_config(args) -> PipelineConfig:
    ensembles, rule = parse_ensembles(args.ensemble)
    try:
        policy = RefinePolicy.parse(args.refine_policy)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if args.estimators < 1:
        raise UsageError("--estimators must be at least 1")
    return PipelineConfig(
        seed=args.seed,
        estimators=args.estimators,
        split=_split(args),
        datasets=tuple(args.datasets.split(",")),
        ensembles=ensembles,
        ensemble_rule=rule,
        refine_policy=policy,
    )


def _matrix(bundle, dataset: str):
    if dataset == "tx":
        m = tx_matrix(bundle)
        return m, [c for c in m.columns if c in AUGMENTED_COLUMNS]
    if dataset == "wallets":
        return wallet_matrix(bundle), None
    raise UsageError(f"unknown dataset {dataset!r}")


def _fit(train, cfg: PipelineConfig) -> dict:
    return {
        "RF": train_random_forest(train, estimators=cfg.estimators, seed=cfg.seed),
        "LR": train_logistic(train, max_iterations=cfg.lr_max_iterations, seed=cfg.seed),
    }


def _need_output(args) -> Path:
    if not args.output:
        raise UsageError("--output is required")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_input(args) -> Path:
    if not args.input:
        raise UsageError("--input is required")
    path = Path(args.input)
    if not path.exists():
        raise UsageError(f"input {path} does not exist")
    return path


# -- commands -----------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    """Validate a bundle directory, report class distributions and write a canonical copy."""
    src, out = _need_input(args), _need_output(args)
    bundle = load_bundle(src)
    write_bundle(bundle, out / "bundle")
    dist_tx, dist_w = distribution_report(bundle)
    write_frame(dist_tx, out / "distribution_tx.csv")
    write_frame(dist_w, out / "distribution_wallets.csv")
    report = {"valid": True, "counts": bundle.counts()}
    with open(out / "validation.json", "w", newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out, "ingest", {}, None, src)
    return 0


def _read_meta(path: Path) -> pd.DataFrame:
    meta = pd.read_csv(path, dtype={TX_ID: str}, float_precision="round_trip")
    for col in (TX_ID, TIME_STEP, CLASS):
        if col not in meta.columns:
            raise ForensicsError(f"{path.name} lacks column {col!r}")
    return meta


def cmd_extract(args) -> int:
    """Raw transactions plus per-transaction metadata (time step, class, optional legacy columns) to a bundle."""
    src, out = _need_input(args), _need_output(args)
    txs = read_raw_file(src / RAW_FILE)
    meta = _read_meta(src / META_FILE)
    steps = dict(zip(meta[TX_ID], meta[TIME_STEP].astype(int)))
    classes = {t: label_from_code(c) for t, c in zip(meta[TX_ID], meta[CLASS])}
    legacy_cols = [c for c in meta.columns if c not in (TX_ID, TIME_STEP, CLASS)]
    legacy = None
    if legacy_cols:
        legacy = dict(zip(meta[TX_ID], meta[legacy_cols].to_numpy(dtype=np.float64).tolist()))
    missing = [t.txid for t in txs if t.txid not in steps]
    if missing:
        raise ForensicsError(f"{len(missing)} transactions lack metadata, first {missing[0]}")
    bundle = extract_bundle(txs, steps, classes, legacy_features=legacy, legacy_columns=legacy_cols)
    write_bundle(bundle, out)
    write_manifest(out, "extract", {}, None, src, {"counts": bundle.counts()})
    return 0


def cmd_graphs(args) -> int:
    """Build the four graph views plus user clusters and export them as csv or graphml."""
    src, out = _need_input(args), _need_output(args)
    if args.format not in ("csv", "graphml"):
        raise UsageError("--format must be csv or graphml for graph exports")
    graphs = build_all(load_bundle(src))
    views = {"money_flow": graphs.money_flow, "actors": graphs.actors,
             "addr_tx": graphs.addr_tx.graph, "users": graphs.users.graph}
    for name, g in views.items():
        if args.format == "graphml":
            write_graphml(g, out / f"{name}.graphml")
        else:
            write_edge_list(g, out / f"{name}.csv")
    users = graphs.users
    write_table(
        [{"address": a, "user": users.user_of[a]} for a in sorted(users.user_of)],
        out / "address_users.csv", ["address", "user"],
    )
    write_table([asdict(user_stats(users))], out / "user_stats.csv")
    write_manifest(out, "graphs", {"format": args.format}, None, src)
    return 0


def cmd_train(args) -> int:
    """Fit LR and RF per dataset on the training steps and save the models and their test-step predictions."""
    src, out = _need_input(args), _need_output(args)
    cfg = pipeline_config(args)
    bundle = load_bundle(src)
    rows = []
    for ds in cfg.datasets:
        m, scale = _matrix(bundle, ds)
        train, test, _ = prepare(m, cfg.split, scale)
        for name, model in _fit(train, cfg).items():
            save_model(model, out / f"{ds}_{name}.model")
            rows += [dict(zip(("dataset", "model", "id", "true_label", "predicted_label", "illicit_vote_share"), (ds, name) + r))
                     for r in prediction_rows(model, test)]
    write_table(rows, out / "predictions.csv",
                ["dataset", "model", "id", "true_label", "predicted_label", "illicit_vote_share"])
    write_manifest(out, "train", cfg.as_dict(), cfg.seed, src)
    return 0


def cmd_evaluate(args) -> int:
    """Full report: metrics, refinement, importance, cases, predictions, trends."""
    src, out = _need_input(args), _need_output(args)
    cfg = pipeline_config(args)
    evaluation_run(load_bundle(src), cfg, out)
    return 0


def cmd_cases(args) -> int:
    """EASY/HARD/AVERAGE breakdown of illicit test rows for the models named by --ensemble."""
    src, out = _need_input(args), _need_output(args)
    cfg = pipeline_config(args)
    bundle = load_bundle(src)
    names = sorted({n for group in cfg.ensembles for n in group})
    case_rows, id_rows = [], []
    for ds in cfg.datasets:
        m, scale = _matrix(bundle, ds)
        train, test, _ = prepare(m, cfg.split, scale)
        models = _fit(train, cfg)
        preds = {n: models[n].predict(test) for n in names}
        br = categorize_cases(preds, test.labels, test.time_steps, test.ids)
        for case, row in br.by_time_step().iterrows():
            for step, n in row.items():
                case_rows.append({"dataset": ds, "case": case, "time_step": step, "count": int(n)})
        id_rows += [{"dataset": ds, "id": i, "time_step": int(t), "case": c}
                    for i, t, c in zip(br.ids, br.time_steps, br.category)]
    write_table(case_rows, out / "cases_by_timestep.csv", ["dataset", "case", "time_step", "count"])
    write_table(id_rows, out / "cases.csv", ["dataset", "id", "time_step", "case"])
    write_manifest(out, "cases", {**cfg.as_dict(), "models": names}, cfg.seed, src)
    return 0


def cmd_refine(args) -> int:
    """Rank features by importance and retrain on the subset kept by --refine-policy."""
    src, out = _need_input(args), _need_output(args)
    cfg = pipeline_config(args)
    bundle = load_bundle(src)
    metric_rows, imp_rows = [], []
    selected_all = {}
    for ds in cfg.datasets:
        m, scale = _matrix(bundle, ds)
        train, test, _ = prepare(m, cfg.split, scale)
        rf = train_random_forest(train, estimators=cfg.estimators, seed=cfg.seed)
        report = importance_report(rf, test, train, cfg.permutation_repeats, cfg.seed, cfg.drop_column)
        train_r, selected = refine_features(train, report, cfg.refine_policy)
        rf_r = train_random_forest(train_r, estimators=cfg.estimators, seed=cfg.seed)
        for variant, model, t in (("all", rf, test), ("refined", rf_r, test.with_columns(selected))):
            rep = metrics(confusion(model.predict(t), t.labels))
            metric_rows.append({"dataset": ds, "model": "RF", "features": variant,
                                "n_features": len(t.columns), **asdict(rep)})
        imp_rows += [{"dataset": ds, **r, "selected": r["feature"] in selected} for r in report.as_rows()]
        selected_all[ds] = selected
    write_table(metric_rows, out / "metrics.csv")
    write_table(imp_rows, out / "importance.csv",
                ["dataset", "feature", "impurity", "permutation", "drop_column", "combined_score", "combined_rank", "selected"])
    write_manifest(out, "refine", cfg.as_dict(), cfg.seed, src, {"selected_features": selected_all})
    return 0


def cmd_synth(args) -> int:
    """Write a synthetic chain as raw transactions plus metadata and ground truth."""
    out = _need_output(args)
    if args.format not in ("csv", "jsonl"):
        raise UsageError("--format for synth is jsonl (raw) with csv metadata")
    overrides = {k: getattr(args, k) for k in ("n_users", "n_time_steps") if getattr(args, k) is not None}
    chain = generate_chain(ChainConfig(seed=args.seed, **overrides))
    with open(out / RAW_FILE, "w", newline="\n") as fh:
        write_raw_transactions(chain.transactions, fh)
    meta_rows = []
    for tx in chain.transactions:
        row = {TX_ID: tx.txid, TIME_STEP: chain.time_steps[tx.txid], CLASS: int(chain.tx_labels[tx.txid])}
        row.update(zip(chain.noise_columns, chain.noise_features.get(tx.txid, [])))
        meta_rows.append(row)
    write_table(meta_rows, out / META_FILE, [TX_ID, TIME_STEP, CLASS] + chain.noise_columns)
    write_table([{TX_ID: t, "illicit": chain.tx_truth[t]} for t in chain.time_steps], out / "truth_transactions.csv")
    write_table(
        [{"address": a, "user": u, "illicit": u in chain.illicit_users} for a, u in sorted(chain.user_of.items())],
        out / "truth_users.csv", ["address", "user", "illicit"],
    )
    write_manifest(out, "synth", asdict(chain.config), args.seed, None, {"n_transactions": len(chain.transactions)})
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "extract": cmd_extract,
    "graphs": cmd_graphs,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "cases": cmd_cases,
    "refine": cmd_refine,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chainforensics", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=(fn.__doc__ or name).splitlines()[0])
        sp.add_argument("--input", help="input directory (or file)")
        sp.add_argument("--output", help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--estimators", type=int, default=50)
        sp.add_argument("--train-steps", default="1-34")
        sp.add_argument("--test-steps", default="35-49")
        sp.add_argument("--ensemble", default="RF+LR", help="e.g. RF+LR or RF+LR:majority")
        sp.add_argument("--refine-policy", default="cumulative:0.95", help="cumulative:F, top_k:N or drop_bottom:F")
        sp.add_argument("--format", default="jsonl" if name == "synth" else "csv")
        sp.add_argument("--datasets", default="tx,wallets", help="comma list of tx, wallets")
        if name == "synth":
            sp.add_argument("--n-users", type=int, default=None)
            sp.add_argument("--n-time-steps", type=int, default=None)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ForensicsError, OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
