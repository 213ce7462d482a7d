"""From predictions to a simulated book: daily top-k rebalancing.

Trains a small model, scores the held-out dates, then runs the
portfolio simulation twice (with and without transaction costs) and a
grid search over portfolio sizes. Takes about half a minute.
"""

from conceptcast.backtest import (CostModel, cumulative_return, grid_search_k,
                                  market_prices, model_predictions,
                                  run_backtest)
from conceptcast.data import Splits
from conceptcast.model import ModelConfig
from conceptcast.synthetic import SyntheticSpec, synthetic_market
from conceptcast.train import TrainConfig, train_one

market = synthetic_market(SyntheticSpec(n_stocks=40, n_factors=3, horizon=320,
                                        seed=1, disclosed_factors=2,
                                        noise_scale=0.05))
dates = market.labeled_dates()
splits = Splits(train=(dates[0], dates[149]), valid=(dates[150], dates[199]),
                test=(dates[200], dates[-1]))
config = ModelConfig(hidden_size=16, gru_layers=1, dtype="float32")
record, params = train_one(market, splits, config,
                           TrainConfig(learning_rate=1e-3, max_epochs=4,
                                       patience=4), seed=0)
test_dates = market.labeled_dates(splits, "test")
preds = model_predictions(market, params, config, test_dates)
prices = market_prices(market, test_dates)
print(f"trained to valid IC {max(record.valid_ics):+.4f}; "
      f"backtesting {len(test_dates)} dates, {len(market.stocks)} stocks\n")

for label, costs in (("0.05%/0.15% costs", None),
                     ("cost-free", CostModel(0.0, 0.0))):
    result = run_backtest(test_dates, preds, prices, k=10, costs=costs)
    series, final = cumulative_return(result)
    fees = sum(t.cost for t in result.trades)
    print(f"top-10, {label}: final CR {final:+.2%}, "
          f"{len(result.trades)} trades, fees {fees:,.0f}")
    tail = ", ".join(f"{d}: {cr:+.2%}" for d, cr in series[-3:])
    print(f"  last days: {tail}")

# pick k on the validation window, never on test
valid_dates = market.labeled_dates(splits, "valid")
valid_preds = model_predictions(market, params, config, valid_dates)
valid_prices = market_prices(market, valid_dates)


def valid_cr(k: int) -> float:
    return run_backtest(valid_dates, valid_preds, valid_prices, k=k).final_cr


best_k, table = grid_search_k(valid_cr, candidates=(5, 10, 20))
print("\ngrid search on the validation window:")
for k, cr in table.items():
    marker = " <- selected" if k == best_k else ""
    print(f"  k={k:2d}: CR {cr:+.2%}{marker}")
