"""Reading and writing the eight-file dataset layout and the raw transaction line format.

The dataset is held as pandas frames inside :class:`DatasetBundle`.  Identifiers
are always strings (published transaction ids are numeric, addresses are
base58), feature values are float64 and are written with 8 decimal places.

Raw transaction format (one JSON object per line)::

    {"txid": "t1", "block": 100,
     "inputs": [["addrA", 100000000, "t0"]],
     "outputs": [["addrB", 90000000], ["addrC", 9900000]],
     "fee_satoshis": 100000, "size_bytes": 226}

The optional third element of an input names the transaction whose output is
being spent; when present it yields the money-flow edge ``t0 -> t1``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import IO, Iterable, Mapping

import numpy as np
import pandas as pd

from .core import (
    ClassLabel,
    ForensicsError,
    InvalidTransaction,
    RawTransaction,
    TxInput,
    TxOutput,
    label_from_code,
)

log = logging.getLogger(__name__)

TX_ID = "txId"
ADDRESS = "address"
TIME_STEP = "Time step"
CLASS = "class"

LOCAL_COLUMNS = [f"LF_{i}" for i in range(1, 94)]
AGGREGATE_COLUMNS = [f"AF_{i}" for i in range(1, 73)]
STAT_SUFFIXES = ("total", "min", "max", "mean", "median")
AUGMENTED_COLUMNS = (
    [f"BTC_in_{s}" for s in STAT_SUFFIXES]
    + [f"BTC_out_{s}" for s in STAT_SUFFIXES]
    + ["TXS_in", "TXS_out", "ADDR_in", "ADDR_out", "BTC_total", "fees", "size"]
)
WALLET_STAT_GROUPS = (
    "btc_transacted",
    "btc_sent",
    "btc_received",
    "fees",
    "fees_share",
    "blocks_txs",
    "blocks_input",
    "blocks_output",
    "addr_interactions",
)
WALLET_SCALARS = (
    "class",
    "txs_total",
    "txs_input",
    "txs_output",
    "timesteps",
    "lifetime_blocks",
    "block_first",
    "block_last",
    "block_first_sent",
    "block_first_receive",
    "repeat_interactions",
)
WALLET_COLUMNS = [f"{g}_{s}" for g in WALLET_STAT_GROUPS for s in STAT_SUFFIXES] + list(WALLET_SCALARS)

FILES = {
    "tx_features": "txs_features.csv",
    "tx_edges": "txs_edgelist.csv",
    "tx_classes": "txs_classes.csv",
    "wallet_features": "wallets_features.csv",
    "wallet_classes": "wallets_classes.csv",
    "addr_addr_edges": "AddrAddr_edgelist.csv",
    "addr_tx_edges": "AddrTx_edgelist.csv",
    "tx_addr_edges": "TxAddr_edgelist.csv",
}
EDGE_HEADERS = {
    "tx_edges": ("txId1", "txId2"),
    "addr_addr_edges": ("input_address", "output_address"),
    "addr_tx_edges": ("input_address", TX_ID),
    "tx_addr_edges": (TX_ID, "output_address"),
}


class MissingFile(ForensicsError):
    pass


class MalformedRow(ForensicsError):
    def __init__(self, file: str, line: int, reason: str):
        super().__init__(f"{file}:{line}: {reason}")
        self.file, self.line, self.reason = file, line, reason


class DanglingEdge(ForensicsError):
    def __init__(self, kind: str, node_id: str):
        super().__init__(f"{kind} edge endpoint {node_id!r} is not in the node table")
        self.kind, self.node_id = kind, node_id


class DuplicateClass(ForensicsError):
    def __init__(self, node_id: str):
        super().__init__(f"{node_id!r} has more than one class entry")
        self.node_id = node_id


class MissingClass(ForensicsError):
    def __init__(self, node_id: str):
        super().__init__(f"{node_id!r} has no class entry")
        self.node_id = node_id


class ParseError(ForensicsError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line, self.reason = line, reason


class BalanceViolation(ForensicsError):
    def __init__(self, txid: str, diff: int):
        super().__init__(f"{txid}: inputs - outputs - fee = {diff} satoshis")
        self.txid, self.diff = txid, diff


def canonical_floats(values: np.ndarray) -> np.ndarray:
    """Snap float values to what an 8-decimal text round trip would return."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return arr.copy()
    return np.char.mod("%.8f", arr).astype(np.float64)


def _classes_frame(id_col: str, mapping: Mapping[str, ClassLabel] | None = None) -> pd.DataFrame:
    mapping = mapping or {}
    return pd.DataFrame(
        {id_col: pd.Series(list(mapping.keys()), dtype=object), CLASS: pd.Series([int(v) for v in mapping.values()], dtype=np.int64)}
    )


def _edges_frame(kind: str, pairs: Iterable[tuple[str, str]] = ()) -> pd.DataFrame:
    a, b = EDGE_HEADERS[kind]
    pairs = list(pairs)
    return pd.DataFrame(
        {a: pd.Series([p[0] for p in pairs], dtype=object), b: pd.Series([p[1] for p in pairs], dtype=object)}
    )


def _features_frame(id_col: str, ids, steps, columns: list[str], values) -> pd.DataFrame:
    values = canonical_floats(np.asarray(values, dtype=np.float64).reshape(len(ids), len(columns)))
    frame = pd.DataFrame(values, columns=columns)
    frame.insert(0, TIME_STEP, np.asarray(steps, dtype=np.int64))
    frame.insert(0, id_col, pd.Series([str(i) for i in ids], dtype=object))
    return frame


@dataclass(frozen=True)
class DatasetBundle:
    """The eight tables of a transactions + actors dataset.

    Frames should be treated as read-only; helpers return copies.
    """

    tx_features: pd.DataFrame
    tx_classes: pd.DataFrame
    tx_edges: pd.DataFrame
    wallet_features: pd.DataFrame
    wallet_classes: pd.DataFrame
    addr_addr_edges: pd.DataFrame
    addr_tx_edges: pd.DataFrame
    tx_addr_edges: pd.DataFrame

    @classmethod
    def empty(cls, tx_feature_columns=AUGMENTED_COLUMNS) -> "DatasetBundle":
        return cls.from_parts(
            tx_ids=[], tx_steps=[], tx_feature_columns=list(tx_feature_columns), tx_values=np.zeros((0, len(tx_feature_columns))),
            tx_classes={}, tx_edges=[], wallet_ids=[], wallet_steps=[], wallet_values=np.zeros((0, len(WALLET_COLUMNS))),
            wallet_classes={}, addr_addr=[], addr_tx=[], tx_addr=[],
        )

    @classmethod
    def from_parts(
        cls,
        *,
        tx_ids,
        tx_steps,
        tx_feature_columns: list[str],
        tx_values,
        tx_classes: Mapping[str, ClassLabel],
        tx_edges,
        wallet_ids,
        wallet_steps,
        wallet_values,
        wallet_classes: Mapping[str, ClassLabel],
        addr_addr,
        addr_tx,
        tx_addr,
        wallet_feature_columns: list[str] = WALLET_COLUMNS,
    ) -> "DatasetBundle":
        """Assemble a bundle from plain Python data, snapping floats to 8 decimals."""
        return cls(
            tx_features=_features_frame(TX_ID, tx_ids, tx_steps, list(tx_feature_columns), tx_values),
            tx_classes=_classes_frame(TX_ID, tx_classes),
            tx_edges=_edges_frame("tx_edges", tx_edges),
            wallet_features=_features_frame(ADDRESS, wallet_ids, wallet_steps, list(wallet_feature_columns), wallet_values),
            wallet_classes=_classes_frame(ADDRESS, wallet_classes),
            addr_addr_edges=_edges_frame("addr_addr_edges", addr_addr),
            addr_tx_edges=_edges_frame("addr_tx_edges", addr_tx),
            tx_addr_edges=_edges_frame("tx_addr_edges", tx_addr),
        )

    # -- views ---------------------------------------------------------------

    @property
    def tx_feature_columns(self) -> list[str]:
        return [c for c in self.tx_features.columns if c not in (TX_ID, TIME_STEP)]

    @property
    def wallet_feature_columns(self) -> list[str]:
        return [c for c in self.wallet_features.columns if c not in (ADDRESS, TIME_STEP)]

    def tx_class_map(self) -> dict[str, ClassLabel]:
        return {t: ClassLabel(c) for t, c in zip(self.tx_classes[TX_ID], self.tx_classes[CLASS])}

    def wallet_class_map(self) -> dict[str, ClassLabel]:
        return {a: ClassLabel(c) for a, c in zip(self.wallet_classes[ADDRESS], self.wallet_classes[CLASS])}

    def tx_time_steps(self) -> dict[str, int]:
        return dict(zip(self.tx_features[TX_ID], self.tx_features[TIME_STEP].astype(int)))

    def tx_frame(self) -> pd.DataFrame:
        """Transaction features with the class column joined on."""
        return self.tx_features.merge(self.tx_classes, on=TX_ID, how="left", validate="one_to_one")

    def wallet_frame(self) -> pd.DataFrame:
        """Wallet occurrences with the wallet class joined on (as ``label``)."""
        classes = self.wallet_classes.rename(columns={CLASS: "label"})
        return self.wallet_features.merge(classes, on=ADDRESS, how="left", validate="many_to_one")

    def counts(self) -> dict[str, int]:
        return {
            "transactions": len(self.tx_features),
            "tx_edges": len(self.tx_edges),
            "addresses": int(self.wallet_classes[ADDRESS].nunique()),
            "wallet_records": len(self.wallet_features),
            "addr_addr_edges": len(self.addr_addr_edges),
            "addr_tx_edges": len(self.addr_tx_edges),
            "tx_addr_edges": len(self.tx_addr_edges),
        }

    # -- integrity -------------------------------------------------------------

    def validate(self) -> "DatasetBundle":
        """Check referential integrity; raise on the first violation, else return self."""
        tx_ids = _unique_ids(self.tx_features, TX_ID, "txs_features")
        _check_classes(self.tx_classes, TX_ID, tx_ids)
        wallet_ids = set(self.wallet_features[ADDRESS])
        class_ids = _check_classes(self.wallet_classes, ADDRESS, None)
        for a in wallet_ids:
            if a not in class_ids:
                raise MissingClass(a)
        addr_ids = class_ids
        _check_edges(self.tx_edges, "tx_edges", tx_ids, tx_ids)
        _check_edges(self.addr_addr_edges, "addr_addr_edges", addr_ids, addr_ids)
        _check_edges(self.addr_tx_edges, "addr_tx_edges", addr_ids, tx_ids)
        _check_edges(self.tx_addr_edges, "tx_addr_edges", tx_ids, addr_ids)
        dup = self.wallet_features.duplicated([ADDRESS, TIME_STEP])
        if dup.any():
            row = self.wallet_features[dup].iloc[0]
            raise MalformedRow(FILES["wallet_features"], int(np.flatnonzero(dup.to_numpy())[0]) + 2,
                               f"duplicate occurrence ({row[ADDRESS]}, {row[TIME_STEP]})")
        return self

    def equals(self, other: "DatasetBundle") -> bool:
        for name in FILES:
            a, b = getattr(self, name), getattr(other, name)
            if list(a.columns) != list(b.columns) or len(a) != len(b):
                return False
            for col in a.columns:
                x, y = a[col].to_numpy(), b[col].to_numpy()
                if x.dtype.kind == "f" or y.dtype.kind == "f":
                    if not np.array_equal(x.astype(np.float64), y.astype(np.float64), equal_nan=True):
                        return False
                elif not np.array_equal(x.astype(str), y.astype(str)):
                    return False
        return True


def _unique_ids(frame: pd.DataFrame, col: str, file: str) -> set[str]:
    ids = frame[col]
    dup = ids.duplicated()
    if dup.any():
        pos = int(np.flatnonzero(dup.to_numpy())[0])
        raise MalformedRow(FILES_BY_STEM.get(file, file), pos + 2, f"duplicate id {ids.iloc[pos]!r}")
    return set(ids)


FILES_BY_STEM = {v[:-4]: v for v in FILES.values()}


def _check_classes(frame: pd.DataFrame, col: str, nodes: set[str] | None) -> set[str]:
    ids = frame[col]
    dup = ids.duplicated()
    if dup.any():
        raise DuplicateClass(str(ids[dup].iloc[0]))
    seen = set(ids)
    if nodes is not None:
        for n in nodes:
            if n not in seen:
                raise MissingClass(n)
        for n in seen:
            if n not in nodes:
                raise DanglingEdge("class", n)
    return seen


def _check_edges(frame: pd.DataFrame, kind: str, src_ids: set[str], dst_ids: set[str]) -> None:
    a, b = EDGE_HEADERS[kind]
    for col, ids in ((a, src_ids), (b, dst_ids)):
        bad = ~frame[col].isin(ids)
        if bad.any():
            raise DanglingEdge(kind, str(frame[col][bad].iloc[0]))


# -- files -------------------------------------------------------------------------

def _scan(path: Path) -> list[str]:
    """Check every row has the header's field count; return the header."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise MalformedRow(path.name, 1, "missing header row")
        width = len(header)
        for line, row in enumerate(reader, start=2):
            if len(row) != width:
                if not row:
                    raise MalformedRow(path.name, line, "blank line")
                raise MalformedRow(path.name, line, f"expected {width} fields, found {len(row)}")
    return header


def _find_step_column(header: list[str], path: Path) -> str:
    for c in header[1:]:
        if c.strip().lower().replace("_", " ") in ("time step", "timestep"):
            return c
    raise MalformedRow(path.name, 1, "no time step column in header")


def _read_features(path: Path, id_col: str) -> pd.DataFrame:
    header = _scan(path)
    if header[0] != id_col:
        raise MalformedRow(path.name, 1, f"first column must be {id_col!r}, found {header[0]!r}")
    step_col = _find_step_column(header, path)
    frame = pd.read_csv(path, dtype={id_col: str}, float_precision="round_trip", keep_default_na=False, na_values=[""])
    frame = frame.rename(columns={step_col: TIME_STEP})
    steps = pd.to_numeric(frame[TIME_STEP], errors="coerce")
    bad = steps.isna() | (steps < 1) | (steps != steps.round())
    if bad.any():
        raise MalformedRow(path.name, int(np.flatnonzero(bad.to_numpy())[0]) + 2, "time step must be a positive integer")
    frame[TIME_STEP] = steps.astype(np.int64)
    cols = [id_col, TIME_STEP] + [c for c in frame.columns if c not in (id_col, TIME_STEP)]
    frame = frame[cols]
    for c in cols[2:]:
        col = frame[c]
        if col.dtype.kind not in "fiub":
            num = pd.to_numeric(col, errors="coerce")
            bad = num.isna() & col.notna()
            if bad.any():
                line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
                raise MalformedRow(path.name, line, f"non-numeric value {col[bad].iloc[0]!r} in column {c!r}")
            col = num
        frame[c] = col.astype(np.float64)
    if (frame[id_col] == "").any() or frame[id_col].isna().any():
        raise MalformedRow(path.name, int(np.flatnonzero((frame[id_col].fillna("") == "").to_numpy())[0]) + 2, "empty id")
    return frame.reset_index(drop=True)


def _read_classes(path: Path, id_col: str) -> pd.DataFrame:
    header = _scan(path)
    if len(header) != 2 or header[0] != id_col:
        raise MalformedRow(path.name, 1, f"expected header {id_col},{CLASS}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    frame.columns = [id_col, CLASS]
    codes = []
    for line, raw in enumerate(frame[CLASS], start=2):
        text = raw.strip().lower()
        if text == "unknown":
            codes.append(int(ClassLabel.UNKNOWN))
            continue
        try:
            codes.append(int(label_from_code(int(text))))
        except (ValueError, ForensicsError):
            raise MalformedRow(path.name, line, f"bad class code {raw!r}") from None
    frame[CLASS] = np.asarray(codes, dtype=np.int64)
    return frame


def _read_edges(path: Path, kind: str) -> pd.DataFrame:
    header = _scan(path)
    expected = EDGE_HEADERS[kind]
    if len(header) != 2:
        raise MalformedRow(path.name, 1, f"expected 2 columns, found {len(header)}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    frame.columns = list(expected)
    for col in expected:
        empty = frame[col] == ""
        if empty.any():
            raise MalformedRow(path.name, int(np.flatnonzero(empty.to_numpy())[0]) + 2, "empty id")
    return frame


def load_bundle(directory: str | Path) -> DatasetBundle:
    """Load and cross-validate the eight csv files in ``directory``."""
    directory = Path(directory)
    paths = {}
    for key, name in FILES.items():
        p = directory / name
        if not p.is_file():
            raise MissingFile(str(p))
        paths[key] = p
    wallet_features = _read_features(paths["wallet_features"], ADDRESS)
    # per-transaction wallet rows collapse to the last row of each (address, step)
    n = len(wallet_features)
    wallet_features = wallet_features.drop_duplicates([ADDRESS, TIME_STEP], keep="last").reset_index(drop=True)
    if len(wallet_features) != n:
        log.info("collapsed %d wallet rows to per-(address, time step) occurrences", n - len(wallet_features))
    bundle = DatasetBundle(
        tx_features=_read_features(paths["tx_features"], TX_ID),
        tx_classes=_read_classes(paths["tx_classes"], TX_ID),
        tx_edges=_read_edges(paths["tx_edges"], "tx_edges"),
        wallet_features=wallet_features,
        wallet_classes=_read_classes(paths["wallet_classes"], ADDRESS),
        addr_addr_edges=_read_edges(paths["addr_addr_edges"], "addr_addr_edges"),
        addr_tx_edges=_read_edges(paths["addr_tx_edges"], "addr_tx_edges"),
        tx_addr_edges=_read_edges(paths["tx_addr_edges"], "tx_addr_edges"),
    )
    return bundle.validate()


def write_bundle(bundle: DatasetBundle, directory: str | Path) -> list[Path]:
    """Validate, then write the eight files. Returns the written paths."""
    bundle.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for key, name in FILES.items():
        frame = getattr(bundle, key)
        path = directory / name
        frame.to_csv(path, index=False, float_format="%.8f", lineterminator="\n")
        written.append(path)
    return written


# -- raw transactions ---------------------------------------------------------------

RAW_KEYS = ("txid", "block", "inputs", "outputs", "fee_satoshis", "size_bytes")


def _as_sats(value, line: int, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(line, f"{what} must be an integer satoshi amount, got {value!r}")
    if value < 0:
        raise ParseError(line, f"{what} is negative")
    return value


def parse_raw_transactions(stream: Iterable[str]) -> list[RawTransaction]:
    """Parse line-delimited raw transaction records, preserving input order.

    Blank lines are skipped. A residual imbalance of exactly one satoshi is
    absorbed into the fee; anything larger raises :class:`BalanceViolation`.
    """
    txs = []
    seen = set()
    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"invalid JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise ParseError(line_no, "record is not an object")
        missing = [k for k in RAW_KEYS if k not in obj]
        if missing:
            raise ParseError(line_no, f"missing keys {missing}")
        txid = obj["txid"]
        if isinstance(txid, int) and not isinstance(txid, bool):
            txid = str(txid)
        if not isinstance(txid, str) or not txid:
            raise ParseError(line_no, "txid must be a non-empty string")
        if txid in seen:
            raise ParseError(line_no, f"duplicate txid {txid!r}")
        seen.add(txid)
        block = obj["block"]
        if isinstance(block, bool) or not isinstance(block, int) or block < 0:
            raise ParseError(line_no, "block must be a non-negative integer")
        size = obj["size_bytes"]
        if isinstance(size, bool) or not isinstance(size, int) or size <= 0:
            raise ParseError(line_no, "size_bytes must be a positive integer")
        inputs, outputs = [], []
        for key, dest in (("inputs", inputs), ("outputs", outputs)):
            entries = obj[key]
            if not isinstance(entries, list):
                raise ParseError(line_no, f"{key} must be a list")
            for entry in entries:
                width = (2, 3) if key == "inputs" else (2,)
                if not isinstance(entry, list) or len(entry) not in width:
                    raise ParseError(line_no, f"bad {key} entry {entry!r}")
                addr = entry[0]
                if not isinstance(addr, str) or not addr:
                    raise ParseError(line_no, f"bad address in {key}: {addr!r}")
                sats = _as_sats(entry[1], line_no, f"{key} amount")
                if key == "inputs":
                    spent = entry[2] if len(entry) == 3 else None
                    if spent is not None and not isinstance(spent, (str, int)):
                        raise ParseError(line_no, f"bad spent txid {spent!r}")
                    dest.append(TxInput(addr, sats, None if spent is None else str(spent)))
                else:
                    dest.append(TxOutput(addr, sats))
        fee = _as_sats(obj["fee_satoshis"], line_no, "fee_satoshis")
        if inputs:
            diff = sum(i.sats for i in inputs) - sum(o.sats for o in outputs) - fee
            if abs(diff) > 1:
                raise BalanceViolation(txid, diff)
            if diff:
                log.debug("%s: absorbing %d satoshi imbalance into fee", txid, diff)
                fee += diff
        try:
            txs.append(RawTransaction(txid, block, tuple(inputs), tuple(outputs), fee, size))
        except InvalidTransaction as exc:
            raise ParseError(line_no, str(exc)) from None
    return txs


def raw_transaction_line(tx: RawTransaction) -> str:
    inputs = [[i.address, i.sats] + ([i.spent_txid] if i.spent_txid is not None else []) for i in tx.inputs]
    obj = {
        "txid": tx.txid,
        "block": tx.block_height,
        "inputs": inputs,
        "outputs": [[o.address, o.sats] for o in tx.outputs],
        "fee_satoshis": tx.fee,
        "size_bytes": tx.size_bytes,
    }
    return json.dumps(obj, separators=(",", ":"))


def write_raw_transactions(txs: Iterable[RawTransaction], stream: IO[str]) -> int:
    n = 0
    for tx in txs:
        stream.write(raw_transaction_line(tx))
        stream.write("\n")
        n += 1
    return n


def read_raw_file(path: str | Path) -> list[RawTransaction]:
    with open(path) as fh:
        return parse_raw_transactions(fh)


# -- reports -------------------------------------------------------------------------

def _distribution(steps: pd.Series, labels: pd.Series, n_steps: int | None) -> pd.DataFrame:
    if n_steps is None:
        n_steps = int(steps.max()) if len(steps) else 0
    index = pd.RangeIndex(1, n_steps + 1, name="time_step")
    out = pd.DataFrame(0, index=index, columns=["unknown", "illicit", "licit"], dtype=np.int64)
    if len(steps):
        table = pd.crosstab(steps.astype(int), labels.astype(int))
        for label, col in ((ClassLabel.UNKNOWN, "unknown"), (ClassLabel.ILLICIT, "illicit"), (ClassLabel.LICIT, "licit")):
            if int(label) in table.columns:
                out[col] = table[int(label)].reindex(index, fill_value=0).astype(np.int64)
    return out


def distribution_report(bundle: DatasetBundle, n_steps: int | None = None) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Per-time-step class counts: (transactions, wallet occurrences)."""
    tx = bundle.tx_frame()
    wallets = bundle.wallet_frame()
    return (
        _distribution(tx[TIME_STEP], tx[CLASS], n_steps),
        _distribution(wallets[TIME_STEP], wallets["label"], n_steps),
    )


def with_frames(bundle: DatasetBundle, **frames: pd.DataFrame) -> DatasetBundle:
    """Copy of ``bundle`` with some tables replaced (used by tests and tooling)."""
    return replace(bundle, **frames)
