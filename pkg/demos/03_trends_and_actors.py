"""Per-step feature trends by class, and how long illicit actors stay active.

    python demos/03_trends_and_actors.py
"""

import pandas as pd

from chainforensics import ClassLabel
from chainforensics.features import bundle_actor_timeline, feature_trend_series
from chainforensics.ingest import distribution_report
from chainforensics.synth import ChainConfig, generate_chain

chain = generate_chain(ChainConfig(seed=7, n_users=60, n_time_steps=10, tx_rate=0.25))
bundle = chain.to_bundle()

tx_dist, wallet_dist = distribution_report(bundle)
print("transactions per step and class:")
print(tx_dist.to_string())

# Illicit senders pay higher fees and fan out to more outputs, which shows up
# as a gap between the two class means at every step.
frame = bundle.tx_frame()
for feature in ("fees", "ADDR_out"):
    trend = pd.DataFrame({
        label.name.lower(): feature_trend_series(frame, feature, label)
        for label in (ClassLabel.ILLICIT, ClassLabel.LICIT)
    })
    print(f"\nmean {feature} per step:")
    print(trend.round(6).to_string())

# Wallet rows carry the label derived from the transactions each address touched.
timeline = bundle_actor_timeline(bundle)
print(f"\n{len(timeline.active_steps)} illicit addresses; active illicit addresses per step,"
      " grouped by how many steps each is active in:")
print(timeline.table.to_string())
