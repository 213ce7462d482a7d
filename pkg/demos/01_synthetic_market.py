"""Walk through the synthetic market generator.

Builds a small factor-driven market, then shows what the framework
actually consumes: the daily panel, one feature window, the per-date
concept blocks, and how labels line up with next-day price moves.
"""

import numpy as np

from conceptcast.synthetic import SyntheticSpec, synthetic_market

spec = SyntheticSpec(n_stocks=12, n_factors=3, horizon=90, seed=42,
                     disclosed_factors=2)
market = synthetic_market(spec)

print(f"market: {len(market.stocks)} stocks x {len(market.dates)} days "
      f"({market.dates[0]} .. {market.dates[-1]})")

labeled = market.labeled_dates()
print(f"labeled dates: {len(labeled)} (the first 60 days feed lookback "
      f"windows, the last day has no next-day label)\n")

date = labeled[0]
batch = market.batch(date)
print(f"cross-section for {date}:")
print(f"  {len(batch.ids)} tradable stocks, sequences {batch.sequences.shape} "
      "(stocks x lookback x fields)")
print(f"  fields per day: open close high low vwap volume, each divided by "
      "the current close (volume by current volume)")

win = batch.sequences[0]
print(f"  {batch.ids[0]} window close-ratio range: "
      f"{win[:, 1].min():.3f} .. {win[:, 1].max():.3f}\n")

print("concept blocks on that date (name -> members):")
for name, members in sorted(batch.concepts.items()):
    ids = [batch.ids[i] for i in members]
    print(f"  {name}: {', '.join(ids)}")
print("(one factor stays undisclosed: the hidden-concept module exists "
      "to find groupings like it)\n")

# labels are next-day relative changes; verify against the raw panel
t = market.date_index[date]
close = market.close
manual = close[t + 1] / close[t] - 1.0
print("labels vs prices for three stocks:")
for i in batch.stock_idx[:3]:
    print(f"  {market.stocks[i]}: label {market.labels.raw[t, i]:+.5f}  "
          f"close[t+1]/close[t]-1 = {manual[i]:+.5f}")

z = batch.labels_norm
print(f"\ntraining targets are z-scored per date: mean {z.mean():+.1e}, "
      f"std {z.std():.3f}")
