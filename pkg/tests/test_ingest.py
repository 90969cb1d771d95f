import io

import numpy as np
import pandas as pd
import pytest

from chainforensics.core import ClassLabel, make_transaction
from chainforensics.ingest import (
    AUGMENTED_COLUMNS,
    FILES,
    WALLET_COLUMNS,
    BalanceViolation,
    DanglingEdge,
    DatasetBundle,
    DuplicateClass,
    MalformedRow,
    MissingFile,
    ParseError,
    distribution_report,
    load_bundle,
    parse_raw_transactions,
    raw_transaction_line,
    with_frames,
    write_bundle,
)


def test_schema_widths():
    assert len(AUGMENTED_COLUMNS) == 17
    assert len(WALLET_COLUMNS) == 56
    assert set(FILES.values()) == {
        "txs_features.csv", "txs_edgelist.csv", "txs_classes.csv", "wallets_features.csv",
        "wallets_classes.csv", "AddrAddr_edgelist.csv", "AddrTx_edgelist.csv", "TxAddr_edgelist.csv",
    }


def test_parse_balanced_record():
    line = '{"txid":"x","block":5,"inputs":[["A",100000000]],"outputs":[["B",60000000],["C",39900000]],"fee_satoshis":100000,"size_bytes":226}'
    (tx,) = parse_raw_transactions(io.StringIO(line + "\n"))
    assert tx.txid == "x" and tx.fee == 100_000 and [o.address for o in tx.outputs] == ["B", "C"]


def test_parse_coinbase_and_order():
    lines = [
        '{"txid":"c","block":0,"inputs":[],"outputs":[["M",625000000]],"fee_satoshis":0,"size_bytes":100}',
        '{"txid":"d","block":1,"inputs":[["M",625000000,"c"]],"outputs":[["N",624990000]],"fee_satoshis":10000,"size_bytes":190}',
    ]
    txs = parse_raw_transactions(io.StringIO("\n".join(lines)))
    assert [t.txid for t in txs] == ["c", "d"]
    assert txs[1].inputs[0].spent_txid == "c"


def test_balance_violation():
    line = '{"txid":"bad","block":1,"inputs":[["A",100000000]],"outputs":[["B",90000000]],"fee_satoshis":20000000,"size_bytes":200}'
    with pytest.raises(BalanceViolation):
        parse_raw_transactions([line])


def test_one_satoshi_tolerance():
    line = '{"txid":"r","block":1,"inputs":[["A",100]],"outputs":[["B",90]],"fee_satoshis":9,"size_bytes":200}'
    (tx,) = parse_raw_transactions([line])
    assert tx.input_total == tx.output_total + tx.fee


def test_parse_error_reports_line():
    with pytest.raises(ParseError) as e:
        parse_raw_transactions(["", "{not json"])
    assert e.value.line == 2


def test_raw_line_round_trip(small_chain):
    lines = [raw_transaction_line(t) for t in small_chain.transactions[:50]]
    assert parse_raw_transactions(lines) == small_chain.transactions[:50]


def test_round_trip(tmp_path, small_bundle):
    write_bundle(small_bundle, tmp_path)
    again = load_bundle(tmp_path)
    assert again.equals(small_bundle)
    write_bundle(again, tmp_path / "b")
    for name in FILES.values():
        assert (tmp_path / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_empty_directory(tmp_path):
    with pytest.raises(MissingFile):
        load_bundle(tmp_path)


def test_deleting_a_node_breaks_loading(tmp_path, small_bundle):
    write_bundle(small_bundle, tmp_path)
    feats = pd.read_csv(tmp_path / "txs_features.csv", dtype={"txId": str})
    edges = pd.read_csv(tmp_path / "txs_edgelist.csv", dtype=str)
    victim = edges["txId1"].iloc[0]
    feats[feats["txId"] != victim].to_csv(tmp_path / "txs_features.csv", index=False)
    classes = pd.read_csv(tmp_path / "txs_classes.csv", dtype={"txId": str})
    classes[classes["txId"] != victim].to_csv(tmp_path / "txs_classes.csv", index=False)
    with pytest.raises(DanglingEdge):
        load_bundle(tmp_path)


def test_duplicate_class(tmp_path, small_bundle):
    write_bundle(small_bundle, tmp_path)
    path = tmp_path / "txs_classes.csv"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines + [lines[1]]) + "\n")
    with pytest.raises(DuplicateClass):
        load_bundle(tmp_path)


def test_malformed_row_line_number(tmp_path, small_bundle):
    write_bundle(small_bundle, tmp_path)
    path = tmp_path / "txs_edgelist.csv"
    lines = path.read_text().splitlines()
    lines.insert(3, "a,b,c")
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(MalformedRow) as e:
        load_bundle(tmp_path)
    assert e.value.line == 4


def test_dangling_edge_refused_before_write(tmp_path, small_bundle):
    bad = with_frames(small_bundle, tx_edges=pd.DataFrame({"txId1": ["nope"], "txId2": [small_bundle.tx_features["txId"].iloc[0]]}))
    with pytest.raises(DanglingEdge):
        write_bundle(bad, tmp_path)
    assert not (tmp_path / "txs_features.csv").exists()


def test_distribution_sums_to_totals(small_bundle):
    tx, w = distribution_report(small_bundle)
    assert tx.to_numpy().sum() == len(small_bundle.tx_features)
    assert w.to_numpy().sum() == len(small_bundle.wallet_features)
    counts = small_bundle.tx_classes["class"].value_counts()
    assert tx["illicit"].sum() == counts.get(1, 0)


def test_empty_bundle_distribution():
    tx, w = distribution_report(DatasetBundle.empty(), n_steps=3)
    assert (tx.to_numpy() == 0).all() and tx.shape == (3, 3)
    assert (w.to_numpy() == 0).all()
