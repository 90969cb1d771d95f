import math
from fractions import Fraction

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainforensics.core import ClassLabel, make_transaction
from chainforensics.features import (
    ActivityContext,
    UnknownAddress,
    UnknownFeature,
    augment_transaction,
    bundle_actor_timeline,
    classify_counts,
    extract_bundle,
    feature_trend_series,
    illicit_actor_timeline,
    label_wallets,
    money_flow_edges,
    step_bin,
    wallet_features,
)
from chainforensics.ingest import AUGMENTED_COLUMNS, MissingClass, WALLET_COLUMNS
from chainforensics.synth import ChainConfig, generate_chain
from oracles import naive_label, naive_tx_features, naive_wallet_row

BTC_SUM_COLUMNS = {f"{g}_total" for g in ("btc_transacted", "btc_sent", "btc_received", "fees")}
BTC_SUM_COLUMNS |= {"BTC_in_total", "BTC_out_total", "BTC_total", "fees"}


def assert_stored_row(got, expected, columns):
    """Bundle rows hold the exact value snapped to 8 decimals (half a unit of the last place at most)."""
    for col, g, e in zip(columns, got, expected):
        assert abs(Fraction(g) - Fraction(e)) <= Fraction(5, 10**9) * (1 + Fraction(1, 10**6)), (col, g, e)


def assert_row_matches(got, expected, columns):
    for col, g, e in zip(columns, got, expected):
        if isinstance(e, Fraction):
            if col in BTC_SUM_COLUMNS:
                # satoshi-exact: the stored float is the correctly rounded satoshi count / 1e8
                assert round(g * 10**8) == e * 10**8, col
                assert g == float(e * 10**8) / 10**8, col
            else:
                assert math.isclose(g, float(e), rel_tol=1e-9, abs_tol=1e-15), (col, g, e)
        else:
            assert g == e, (col, g, e)


def test_augment_example():
    tx = make_transaction("t", 1, [("A", 100_000_000), ("B", 300_000_000)], [("C", 390_000_000)], 10_000_000, 250)
    f = augment_transaction(tx, (2, 1))
    assert f.as_row() == [4.0, 1.0, 3.0, 2.0, 2.0, 3.9, 3.9, 3.9, 3.9, 3.9, 2, 1, 2, 1, 4.0, 0.1, 250]


def test_coinbase_features():
    tx = make_transaction("cb", 1, [], [("M", 625_000_000)], 0, 100)
    row = augment_transaction(tx).as_row()
    assert row[:5] == [0.0] * 5
    assert row[AUGMENTED_COLUMNS.index("BTC_total")] == 6.25


def test_single_event_wallet(three_address_txs):
    txs, steps, _ = three_address_txs
    ctx = ActivityContext.build(txs[:1], steps)
    w = wallet_features("A", ctx, 1)
    assert tuple(w.blocks_txs) == (0, 0, 0, 0.0, 0.0)
    assert w.lifetime_blocks == 0


def test_input_gap_example():
    txs = [
        make_transaction("c", 90, [], [("X", 30)], 0, 100),
        make_transaction("i1", 100, [("X", 10)], [("Y", 9)], 1, 100),
        make_transaction("i2", 110, [("X", 10)], [("Y", 9)], 1, 100),
        make_transaction("i3", 140, [("X", 10)], [("Y", 9)], 1, 100),
    ]
    w = wallet_features("X", ActivityContext.build(txs, lambda t: 1), 1)
    assert tuple(w.blocks_input) == (40, 10, 30, 20.0, 20.0)


def test_unknown_address(three_address_txs):
    txs, steps, _ = three_address_txs
    ctx = ActivityContext.build(txs, steps)
    with pytest.raises(UnknownAddress):
        wallet_features("Z", ctx, 2)
    with pytest.raises(UnknownAddress):
        wallet_features("B", ctx, 0)


def test_three_address_scenario_against_oracle(three_address_txs):
    txs, steps, classes = three_address_txs
    b = extract_bundle(txs, steps, classes)
    labels = b.wallet_class_map()
    ctx = ActivityContext.build(txs, steps)
    for _, row in b.wallet_features.iterrows():
        addr, step = row["address"], int(row["Time step"])
        expected = naive_wallet_row(addr, txs, steps, step, int(labels[addr]))
        assert_row_matches(wallet_features(addr, ctx, step, labels[addr]).as_row(), expected, WALLET_COLUMNS)
        assert_stored_row(row[WALLET_COLUMNS].tolist(), expected, WALLET_COLUMNS)
    # B and C touch an illicit transaction; A touches it too
    assert {a: int(c) for a, c in labels.items()} == {"A": 1, "B": 1, "C": 1}


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_synthetic_scenarios_against_oracle(seed):
    chain = generate_chain(ChainConfig(seed=seed, n_users=12, n_time_steps=4, blocks_per_step=3, tx_rate=0.4,
                                       n_noise_features=0, cross_user_cospend_rate=0.2 * seed))
    b = chain.to_bundle()
    edges = money_flow_edges(chain.transactions)
    indeg = {t.txid: sum(1 for e in edges if e[1] == t.txid) for t in chain.transactions}
    outdeg = {t.txid: sum(1 for e in edges if e[0] == t.txid) for t in chain.transactions}
    by_id = {t.txid: t for t in chain.transactions}
    for _, row in b.tx_features.iterrows():
        tx = by_id[row["txId"]]
        expected = naive_tx_features(tx, indeg[tx.txid], outdeg[tx.txid])
        assert_row_matches(augment_transaction(tx, (indeg[tx.txid], outdeg[tx.txid])).as_row(), expected, AUGMENTED_COLUMNS)
        assert_stored_row(row[AUGMENTED_COLUMNS].tolist(), expected, AUGMENTED_COLUMNS)
    labels = b.wallet_class_map()
    ctx = ActivityContext.build(chain.transactions, chain.time_steps)
    for _, row in b.wallet_features.iterrows():
        addr, step = row["address"], int(row["Time step"])
        expected = naive_wallet_row(addr, chain.transactions, chain.time_steps, step, int(labels[addr]))
        assert_row_matches(wallet_features(addr, ctx, step, labels[addr]).as_row(), expected, WALLET_COLUMNS)
        assert_stored_row(row[WALLET_COLUMNS].tolist(), expected, WALLET_COLUMNS)


def test_balance_identity_in_features(small_bundle):
    f = small_bundle.tx_features
    noncoin = f["BTC_in_total"] > 0
    sats = lambda s: np.rint(s.to_numpy() * 1e8).astype(np.int64)  # noqa: E731
    assert (sats(f.loc[noncoin, "BTC_in_total"]) == sats(f.loc[noncoin, "BTC_out_total"]) + sats(f.loc[noncoin, "fees"])).all()
    assert (f["ADDR_in"] >= 0).all() and (f["TXS_out"] >= 0).all()


def test_wallet_rows_cumulative(small_bundle):
    w = small_bundle.wallet_features.sort_values(["address", "Time step"])
    for _, g in w.groupby("address"):
        assert g["txs_total"].is_monotonic_increasing
        assert (g["timesteps"].to_numpy() == np.arange(1, len(g) + 1)).all()
    assert (w["lifetime_blocks"] == w["block_last"] - w["block_first"]).all()


# -- labeling rule --------------------------------------------------------------------

def test_label_examples():
    assert classify_counts(1, 2, 0) is ClassLabel.ILLICIT
    assert classify_counts(0, 2, 8) is ClassLabel.LICIT  # 4.0 > 3.7
    assert classify_counts(0, 1, 3) is ClassLabel.UNKNOWN  # 3.0
    assert classify_counts(0, 0, 1) is ClassLabel.LICIT  # infinite ratio


def test_label_threshold_boundary():
    assert classify_counts(0, 10, 37) is ClassLabel.UNKNOWN  # exactly 3.7
    assert classify_counts(0, 10, 38) is ClassLabel.LICIT
    assert classify_counts(0, 100, 371) is ClassLabel.LICIT
    assert classify_counts(0, 100, 370) is ClassLabel.UNKNOWN


edge_sets = st.lists(
    st.tuples(st.sampled_from("abcdef"), st.integers(0, 40), st.booleans()), max_size=120
)


@given(edge_sets, st.lists(st.sampled_from([1, 2, 3]), min_size=41, max_size=41))
def test_label_rule_property(edges, cls):
    tx_classes = {f"t{i}": ClassLabel(c) for i, c in enumerate(cls)}
    addr_tx = [(a, f"t{i}") for a, i, as_input in edges if as_input]
    tx_addr = [(f"t{i}", a) for a, i, as_input in edges if not as_input]
    got = label_wallets(tx_classes, addr_tx, tx_addr)
    incident = {}
    for a, i, _ in edges:
        incident.setdefault(a, set()).add(i)
    assert set(got) == set(incident)
    for a, txs in incident.items():
        n = [sum(1 for i in txs if cls[i] == k) for k in (1, 2, 3)]
        assert int(got[a]) == naive_label(*n)


@given(st.integers(0, 5), st.integers(0, 30), st.integers(0, 120))
def test_illicit_edge_monotone(i, l, u):
    assert classify_counts(i + 1, l, u) is ClassLabel.ILLICIT


def test_missing_class():
    with pytest.raises(MissingClass):
        label_wallets({}, [("a", "t1")], [])


# -- trends and timelines ------------------------------------------------------------------

def test_trend_constant_and_missing():
    rec = pd.DataFrame({"Time step": [1, 1, 2, 3], "class": [1, 2, 1, 1], "x": [1.0, 1.0, 1.0, 1.0]})
    s = feature_trend_series(rec, "x", ClassLabel.ILLICIT, "class", n_steps=3)
    assert s.tolist() == [1.0, 1.0, 1.0]
    lic = feature_trend_series(rec, "x", ClassLabel.LICIT, "class", n_steps=3)
    assert lic.iloc[0] == 1.0 and np.isnan(lic.iloc[1]) and np.isnan(lic.iloc[2])
    with pytest.raises(UnknownFeature):
        feature_trend_series(rec, "nope", ClassLabel.LICIT, "class")


def test_trend_recovers_planted_ratio():
    rng = np.random.default_rng(0)
    n = 4000
    steps = rng.integers(1, 6, n)
    cls = rng.choice([1, 2], n)
    x = np.where(cls == 1, 2.0, 1.0) * rng.uniform(0.9, 1.1, n)
    rec = pd.DataFrame({"Time step": steps, "class": cls, "x": x})
    ill = feature_trend_series(rec, "x", ClassLabel.ILLICIT, "class")
    lic = feature_trend_series(rec, "x", ClassLabel.LICIT, "class")
    assert np.allclose(ill / lic, 2.0, rtol=0.02)


def test_step_bins():
    assert step_bin(1) == "1"
    assert step_bin(3) == "2-4"
    assert step_bin(4) == "2-4"
    assert step_bin(5) == ">=5"


def test_actor_timeline_bins():
    occ = [("a", 3), ("b", 3), ("b", 7), ("b", 9), ("c", 1), ("c", 2), ("c", 3), ("c", 4), ("c", 5), ("d", 2)]
    classes = {"a": ClassLabel.ILLICIT, "b": ClassLabel.ILLICIT, "c": ClassLabel.ILLICIT, "d": ClassLabel.LICIT}
    tl = illicit_actor_timeline(occ, classes, n_steps=9)
    assert tl.bins == {"a": "1", "b": "2-4", "c": ">=5"}
    assert tl.table.loc["1", 3] == 1
    assert tl.table.to_numpy().sum() == sum(1 for a, _ in occ if a != "d")


def test_bundle_timeline_partitions_illicit(small_bundle):
    tl = bundle_actor_timeline(small_bundle)
    illicit = {a for a, c in small_bundle.wallet_class_map().items() if c is ClassLabel.ILLICIT}
    assert set(tl.bins) == illicit
