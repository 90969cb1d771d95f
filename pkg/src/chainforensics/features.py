"""Transaction and wallet feature extraction, wallet labeling, and time-step trend summaries."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .core import (
    Address,
    ClassLabel,
    ForensicsError,
    FiveStats,
    RawTransaction,
    TxId,
    five_stats_or_zero,
)
from .ingest import (
    ADDRESS,
    AUGMENTED_COLUMNS,
    CLASS,
    TIME_STEP,
    WALLET_COLUMNS,
    WALLET_STAT_GROUPS,
    DatasetBundle,
    MissingClass,
)

# ratio of unknown to licit transactions in the published transactions dataset
LICIT_RATIO_THRESHOLD = 3.7


class UnknownAddress(ForensicsError):
    pass


class UnknownFeature(ForensicsError):
    pass


def _btc(sats: float) -> float:
    return sats / 1e8


def _stats_btc(s: FiveStats) -> list[float]:
    return [_btc(v) for v in s]


# -- transactions -------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentedTxFeatures:
    btc_in: FiveStats
    btc_out: FiveStats
    txs_in: int
    txs_out: int
    addr_in: int
    addr_out: int
    btc_total: int
    fees: int
    size: int

    def as_row(self) -> list[float]:
        """Values in AUGMENTED_COLUMNS order, BTC amounts converted from satoshis."""
        return (
            _stats_btc(self.btc_in)
            + _stats_btc(self.btc_out)
            + [self.txs_in, self.txs_out, self.addr_in, self.addr_out, _btc(self.btc_total), _btc(self.fees), self.size]
        )


def augment_transaction(tx: RawTransaction, degrees: tuple[int, int] = (0, 0)) -> AugmentedTxFeatures:
    """The 17 augmented features of one transaction.

    ``degrees`` is (in-degree, out-degree) in the money-flow graph.
    """
    in_amounts = [i.sats for i in tx.inputs]
    out_amounts = [o.sats for o in tx.outputs]
    return AugmentedTxFeatures(
        btc_in=five_stats_or_zero(in_amounts),
        btc_out=five_stats_or_zero(out_amounts),
        txs_in=int(degrees[0]),
        txs_out=int(degrees[1]),
        addr_in=len(set(tx.input_addresses)),
        addr_out=len(set(tx.output_addresses)),
        btc_total=tx.output_total if tx.is_coinbase else tx.input_total,
        fees=tx.fee,
        size=tx.size_bytes,
    )


def money_flow_edges(txs: Sequence[RawTransaction]) -> list[tuple[TxId, TxId]]:
    """tx -> tx edges from spent-output references, deduplicated, first-seen order.

    References to transactions outside ``txs`` are dropped.
    """
    known = {tx.txid for tx in txs}
    edges, seen = [], set()
    for tx in txs:
        for i in tx.inputs:
            if i.spent_txid is not None and i.spent_txid in known and i.spent_txid != tx.txid:
                e = (i.spent_txid, tx.txid)
                if e not in seen:
                    seen.add(e)
                    edges.append(e)
    return edges


# -- wallets ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Involvement:
    """One address's part in one transaction."""

    block: int
    step: int
    txid: TxId
    sent: int  # satoshis this address contributed as input
    received: int  # satoshis this address received as output
    is_input: bool
    is_output: bool
    fee: int
    tx_total: int
    counterparties: frozenset


class ActivityContext:
    """Chronological per-address involvement lists built from raw transactions.

    Built once and then read-only. Order within an address is (block height, txid).
    """

    def __init__(self, events: Mapping[Address, list[Involvement]]):
        self._events = {a: tuple(sorted(ev, key=lambda e: (e.block, e.txid))) for a, ev in events.items()}

    @classmethod
    def build(cls, txs: Iterable[RawTransaction], time_step_of: Mapping[TxId, int] | Callable[[RawTransaction], int]) -> "ActivityContext":
        step_fn = time_step_of if callable(time_step_of) else (lambda tx: time_step_of[tx.txid])
        events: dict[Address, list[Involvement]] = defaultdict(list)
        for tx in txs:
            step = int(step_fn(tx))
            sent: dict[Address, int] = defaultdict(int)
            received: dict[Address, int] = defaultdict(int)
            for i in tx.inputs:
                sent[i.address] += i.sats
            for o in tx.outputs:
                received[o.address] += o.sats
            everyone = set(sent) | set(received)
            total = tx.output_total if tx.is_coinbase else tx.input_total
            for addr in everyone:
                events[addr].append(
                    Involvement(
                        block=tx.block_height,
                        step=step,
                        txid=tx.txid,
                        sent=sent.get(addr, 0),
                        received=received.get(addr, 0),
                        is_input=addr in sent,
                        is_output=addr in received,
                        fee=tx.fee,
                        tx_total=total,
                        counterparties=frozenset(everyone - {addr}),
                    )
                )
        return cls(events)

    def __contains__(self, addr: Address) -> bool:
        return addr in self._events

    def __len__(self) -> int:
        return len(self._events)

    def addresses(self) -> list[Address]:
        return sorted(self._events)

    def events(self, addr: Address) -> tuple[Involvement, ...]:
        try:
            return self._events[addr]
        except KeyError:
            raise UnknownAddress(addr) from None

    def steps(self, addr: Address) -> list[int]:
        return sorted({e.step for e in self.events(addr)})


@dataclass(frozen=True)
class WalletFeatures:
    """Wallet features; BTC groups are held in satoshis until :meth:`as_row`."""

    label: ClassLabel
    btc_transacted: FiveStats
    btc_sent: FiveStats
    btc_received: FiveStats
    fees: FiveStats
    fees_share: FiveStats
    blocks_txs: FiveStats
    blocks_input: FiveStats
    blocks_output: FiveStats
    addr_interactions: FiveStats
    txs_total: int
    txs_input: int
    txs_output: int
    timesteps: int
    lifetime_blocks: int
    block_first: int
    block_last: int
    block_first_sent: int
    block_first_receive: int
    repeat_interactions: int

    def as_row(self) -> list[float]:
        """The 56 values in WALLET_COLUMNS order."""
        row: list[float] = []
        for group in WALLET_STAT_GROUPS:
            stats = getattr(self, group)
            row += _stats_btc(stats) if group in ("btc_transacted", "btc_sent", "btc_received", "fees") else list(stats)
        row += [
            int(self.label),
            self.txs_total,
            self.txs_input,
            self.txs_output,
            self.timesteps,
            self.lifetime_blocks,
            self.block_first,
            self.block_last,
            self.block_first_sent,
            self.block_first_receive,
            self.repeat_interactions,
        ]
        return [float(v) for v in row]


def _gaps(blocks: list[int]) -> list[int]:
    return [b - a for a, b in zip(blocks, blocks[1:])]


def interaction_count(event: Involvement) -> int:
    """Distinct counterparties (all other input and output addresses) of one transaction."""
    return len(event.counterparties)


def wallet_features(
    addr: Address,
    ctx: ActivityContext,
    scope: int,
    label: ClassLabel = ClassLabel.UNKNOWN,
) -> WalletFeatures:
    """Cumulative features of ``addr`` over its transactions up to and including time step ``scope``."""
    events = [e for e in ctx.events(addr) if e.step <= scope]
    if not events:
        raise UnknownAddress(f"{addr} has no activity at or before time step {scope}")
    blocks = [e.block for e in events]
    in_blocks = [e.block for e in events if e.is_input]
    out_blocks = [e.block for e in events if e.is_output]
    seen_in = defaultdict(int)
    for e in events:
        for c in e.counterparties:
            seen_in[c] += 1
    return WalletFeatures(
        label=label,
        btc_transacted=five_stats_or_zero([e.sent + e.received for e in events]),
        btc_sent=five_stats_or_zero([e.sent for e in events if e.is_input]),
        btc_received=five_stats_or_zero([e.received for e in events if e.is_output]),
        fees=five_stats_or_zero([e.fee for e in events]),
        fees_share=five_stats_or_zero([e.fee / e.tx_total if e.tx_total else 0.0 for e in events]),
        blocks_txs=five_stats_or_zero(_gaps(blocks)),
        blocks_input=five_stats_or_zero(_gaps(in_blocks)),
        blocks_output=five_stats_or_zero(_gaps(out_blocks)),
        addr_interactions=five_stats_or_zero([interaction_count(e) for e in events]),
        txs_total=len(events),
        txs_input=len(in_blocks),
        txs_output=len(out_blocks),
        timesteps=len({e.step for e in events}),
        lifetime_blocks=blocks[-1] - blocks[0],
        block_first=blocks[0],
        block_last=blocks[-1],
        block_first_sent=in_blocks[0] if in_blocks else 0,
        block_first_receive=out_blocks[0] if out_blocks else 0,
        repeat_interactions=sum(1 for n in seen_in.values() if n >= 2),
    )


def label_wallets(
    tx_classes: Mapping[TxId, ClassLabel],
    addr_tx_edges: Iterable[tuple[Address, TxId]],
    tx_addr_edges: Iterable[tuple[TxId, Address]],
) -> dict[Address, ClassLabel]:
    """Label every address touching at least one transaction.

    Illicit if any incident transaction is illicit; otherwise Licit when the
    ratio of unknown to licit incident transactions exceeds 3.7, else Unknown.
    """
    counts: dict[Address, list[int]] = defaultdict(lambda: [0, 0, 0])
    order: list[Address] = []
    seen: set[tuple[Address, TxId]] = set()

    def visit(addr: Address, txid: TxId) -> None:
        try:
            cls = tx_classes[txid]
        except KeyError:
            raise MissingClass(txid) from None
        if addr not in counts:
            order.append(addr)
        # an address on both sides of one transaction counts that transaction once
        if (addr, txid) in seen:
            return
        seen.add((addr, txid))
        counts[addr][int(cls) - 1] += 1

    for addr, txid in addr_tx_edges:
        visit(addr, txid)
    for txid, addr in tx_addr_edges:
        visit(addr, txid)
    return {a: classify_counts(*counts[a]) for a in order}


def classify_counts(illicit: int, licit: int, unknown: int) -> ClassLabel:
    if illicit > 0:
        return ClassLabel.ILLICIT
    if licit == 0:
        return ClassLabel.LICIT if unknown > 0 else ClassLabel.UNKNOWN
    return ClassLabel.LICIT if unknown / licit > LICIT_RATIO_THRESHOLD else ClassLabel.UNKNOWN


# -- extraction from raw transactions ------------------------------------------------------

def extract_bundle(
    txs: Sequence[RawTransaction],
    time_step_of: Mapping[TxId, int] | Callable[[RawTransaction], int],
    tx_classes: Mapping[TxId, ClassLabel],
    tx_edges: Sequence[tuple[TxId, TxId]] | None = None,
    legacy_features: Mapping[TxId, Sequence[float]] | None = None,
    legacy_columns: Sequence[str] = (),
) -> DatasetBundle:
    """Turn raw transactions into a full dataset bundle.

    Money-flow edges default to those implied by spent-output references.
    ``legacy_features`` are passed through in front of the augmented columns.
    """
    step_fn = time_step_of if callable(time_step_of) else (lambda tx: time_step_of[tx.txid])
    if tx_edges is None:
        tx_edges = money_flow_edges(txs)
    indeg: dict[TxId, int] = defaultdict(int)
    outdeg: dict[TxId, int] = defaultdict(int)
    for a, b in tx_edges:
        outdeg[a] += 1
        indeg[b] += 1

    legacy_columns = list(legacy_columns)
    tx_ids, tx_steps, tx_rows = [], [], []
    addr_tx, tx_addr, addr_addr = [], [], []
    for tx in txs:
        tx_ids.append(tx.txid)
        tx_steps.append(int(step_fn(tx)))
        row = list(legacy_features[tx.txid]) if legacy_columns else []
        tx_rows.append(row + augment_transaction(tx, (indeg[tx.txid], outdeg[tx.txid])).as_row())
        ins = list(dict.fromkeys(tx.input_addresses))
        outs = list(dict.fromkeys(tx.output_addresses))
        addr_tx += [(a, tx.txid) for a in ins]
        tx_addr += [(tx.txid, a) for a in outs]
        addr_addr += [(a, b) for a in ins for b in outs]

    labels = label_wallets(tx_classes, addr_tx, tx_addr)
    ctx = ActivityContext.build(txs, step_fn)
    w_ids, w_steps, w_rows = [], [], []
    for addr in ctx.addresses():
        for step in ctx.steps(addr):
            w_ids.append(addr)
            w_steps.append(step)
            w_rows.append(wallet_features(addr, ctx, step, labels[addr]).as_row())

    return DatasetBundle.from_parts(
        tx_ids=tx_ids,
        tx_steps=tx_steps,
        tx_feature_columns=legacy_columns + AUGMENTED_COLUMNS,
        tx_values=np.asarray(tx_rows, dtype=np.float64).reshape(len(tx_ids), len(legacy_columns) + len(AUGMENTED_COLUMNS)),
        tx_classes={t: tx_classes[t] for t in tx_ids},
        tx_edges=tx_edges,
        wallet_ids=w_ids,
        wallet_steps=w_steps,
        wallet_values=np.asarray(w_rows, dtype=np.float64).reshape(len(w_ids), len(WALLET_COLUMNS)),
        wallet_classes={a: labels[a] for a in ctx.addresses()},
        addr_addr=addr_addr,
        addr_tx=addr_tx,
        tx_addr=tx_addr,
    ).validate()


# -- time-step summaries ------------------------------------------------------------------

def feature_trend_series(
    records: pd.DataFrame,
    feature: str,
    label: ClassLabel,
    class_column: str = CLASS,
    n_steps: int | None = None,
) -> pd.Series:
    """Mean of ``feature`` per time step over rows of class ``label``; NaN where a step has none."""
    if feature not in records.columns or feature in (TIME_STEP, class_column):
        raise UnknownFeature(feature)
    if n_steps is None:
        n_steps = int(records[TIME_STEP].max()) if len(records) else 0
    rows = records[records[class_column] == int(label)]
    means = rows.groupby(TIME_STEP)[feature].mean()
    out = means.reindex(pd.RangeIndex(1, n_steps + 1, name="time_step"))
    out.name = feature
    return out


STEP_BINS = ("1", "2-4", ">=5")


def step_bin(n_steps: int) -> str:
    if n_steps <= 1:
        return "1"
    return "2-4" if n_steps <= 4 else ">=5"


@dataclass(frozen=True)
class ActorTimeline:
    active_steps: dict[Address, list[int]]
    tx_counts: dict[Address, dict[int, int]]
    bins: dict[Address, str]
    table: pd.DataFrame  # rows: step bins, columns: time steps, values: active actor counts


def illicit_actor_timeline(
    occurrences: pd.DataFrame | Iterable[tuple[Address, int]],
    classes: Mapping[Address, ClassLabel],
    participation: Iterable[tuple[Address, int]] = (),
    n_steps: int | None = None,
) -> ActorTimeline:
    """Activity timeline of illicit actors.

    ``occurrences`` lists the (address, time step) pairs an address is active in,
    as a frame with address and time-step columns or as plain pairs;
    ``participation`` yields (address, time step) once per transaction touched,
    feeding the per-step transaction counts.
    """
    illicit = {a for a, c in classes.items() if c == ClassLabel.ILLICIT}
    if not isinstance(occurrences, pd.DataFrame):
        occurrences = pd.DataFrame(list(occurrences), columns=[ADDRESS, TIME_STEP])
    occ = occurrences[occurrences[ADDRESS].isin(illicit)]
    active: dict[Address, list[int]] = {}
    for addr, steps in occ.groupby(ADDRESS)[TIME_STEP]:
        active[addr] = sorted({int(s) for s in steps})
    counts: dict[Address, dict[int, int]] = {a: {} for a in active}
    for addr, step in participation:
        if addr in counts:
            counts[addr][int(step)] = counts[addr].get(int(step), 0) + 1
    bins = {a: step_bin(len(s)) for a, s in active.items()}
    if n_steps is None:
        n_steps = max((s[-1] for s in active.values()), default=0)
    table = pd.DataFrame(0, index=list(STEP_BINS), columns=pd.RangeIndex(1, n_steps + 1, name="time_step"), dtype=np.int64)
    for addr, steps in active.items():
        for s in steps:
            if s <= n_steps:
                table.loc[bins[addr], s] += 1
    return ActorTimeline(active, counts, bins, table)


def bundle_actor_timeline(bundle: DatasetBundle, n_steps: int | None = None) -> ActorTimeline:
    """:func:`illicit_actor_timeline` fed from a bundle's wallet rows and address-transaction edges."""
    steps = bundle.tx_time_steps()
    pairs = dict.fromkeys(zip(bundle.addr_tx_edges["input_address"], bundle.addr_tx_edges["txId"]))
    pairs.update(dict.fromkeys(zip(bundle.tx_addr_edges["output_address"], bundle.tx_addr_edges["txId"])))
    participation = [(a, steps[t]) for a, t in pairs]
    return illicit_actor_timeline(bundle.wallet_features[[ADDRESS, TIME_STEP]], bundle.wallet_class_map(), participation, n_steps)
