"""Load the published dataset and summarise it, if it is available locally.

Point CHAINFORENSICS_DATA_DIR at the directory holding the eight csv files.
Loading checks ids, classes and edge endpoints; clustering all addresses takes
a few minutes on the full data.

    CHAINFORENSICS_DATA_DIR=/data/bundle python demos/04_published_dataset.py
"""

import os
import sys

from chainforensics import load_bundle
from chainforensics.graphs import build_addr_tx_graph, cluster_users, user_stats

root = os.environ.get("CHAINFORENSICS_DATA_DIR")
if not root:
    sys.exit("set CHAINFORENSICS_DATA_DIR to the published bundle directory")

bundle = load_bundle(root)
for name, n in bundle.counts().items():
    print(f"{name:>20}: {n}")

g = build_addr_tx_graph(
    zip(bundle.addr_tx_edges["input_address"], bundle.addr_tx_edges["txId"]),
    zip(bundle.tx_addr_edges["txId"], bundle.tx_addr_edges["output_address"]),
)
stats = user_stats(cluster_users(g))
print(f"users {stats.n_users}, mean {stats.mean:.2f} addresses, max {stats.max}, "
      f"{stats.share_1_10:.2%} with 1-10 addresses")
