"""Daily top-k long-only simulation with asymmetric transaction costs.

Rebalance procedure (runs once per date, in this exact order):

1. Rank that date's predictions descending, ties to the smaller stock id;
   the top k (or fewer, if the cross-section is small) become the target.
2. Sell every priced holding outside the target at the date's close,
   paying the sell cost on the notional.
3. Compute the per-position budget: (cash + value of kept target
   positions) / k_eff. Kept positions above budget are sold down to it
   (sell cost applies).
4. Buy each target position up to budget. If cash cannot cover all buys
   plus buy costs, every buy is scaled by the same factor so cash lands
   at zero.

Execution happens at the same date-t close the prediction was formed on.
Held stocks with no price row that date are frozen: valued at their last
known close, never traded, and a warning is logged.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

K_GRID = (10, 20, 30, 40, 50)
INITIAL_CAPITAL = 1e8


@dataclass
class CostModel:
    buy_rate: float = 0.0005
    sell_rate: float = 0.0015

    def validate(self):
        if self.buy_rate < 0 or self.sell_rate < 0:
            raise ValueError(f"cost rates must be >= 0, got {self.buy_rate}, {self.sell_rate}")


@dataclass
class Trade:
    date: str
    stock: str
    side: str       # "buy" or "sell"
    shares: float
    price: float
    cost: float


@dataclass
class PortfolioState:
    cash: float
    holdings: dict[str, float] = field(default_factory=dict)
    last_price: dict[str, float] = field(default_factory=dict)
    equity_curve: list[tuple[str, float]] = field(default_factory=list)
    trades: list[Trade] = field(default_factory=list)

    def value(self, prices: dict[str, float]) -> float:
        total = self.cash
        for stock, shares in self.holdings.items():
            price = prices.get(stock, self.last_price.get(stock))
            total += shares * price
        return total


def rebalance(state: PortfolioState, date: str, predictions: dict[str, float],
              prices: dict[str, float], k: int, costs: CostModel) -> PortfolioState:
    """Apply one day's target-tracking trades; see the module docstring."""
    costs.validate()
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    for stock, price in prices.items():
        state.last_price[stock] = price

    frozen = {s for s in state.holdings if s not in prices}
    for stock in frozen:
        log.warning("date %s: no price for held stock %s, position frozen", date, stock)

    ranked = sorted(predictions, key=lambda s: (-predictions[s], s))
    target = ranked[:k]
    k_eff = len(target)

    def sell(stock: str, shares: float):
        price = prices[stock]
        notional = shares * price
        fee = notional * costs.sell_rate
        state.cash += notional - fee
        state.holdings[stock] = state.holdings.get(stock, 0.0) - shares
        if state.holdings[stock] <= 0.0:
            del state.holdings[stock]
        state.trades.append(Trade(date, stock, "sell", shares, price, fee))

    for stock in sorted(set(state.holdings) - set(target) - frozen):
        sell(stock, state.holdings[stock])

    if k_eff:
        kept_value = sum(state.holdings.get(s, 0.0) * prices[s] for s in target)
        budget = (state.cash + kept_value) / k_eff

        buys = []
        for stock in target:
            held_value = state.holdings.get(stock, 0.0) * prices[stock]
            gap = budget - held_value
            if gap < 0.0:
                sell(stock, -gap / prices[stock])
            elif gap > 0.0:
                buys.append((stock, gap))

        total_needed = sum(gap for _, gap in buys)
        gross = total_needed * (1.0 + costs.buy_rate)
        scale = 1.0 if gross <= state.cash or gross == 0.0 else state.cash / gross
        for stock, gap in buys:
            notional = gap * scale
            price = prices[stock]
            fee = notional * costs.buy_rate
            state.cash -= notional + fee
            state.holdings[stock] = state.holdings.get(stock, 0.0) + notional / price
            state.trades.append(Trade(date, stock, "buy", notional / price, price, fee))
        if -1e-6 * INITIAL_CAPITAL < state.cash < 0.0:
            state.cash = 0.0

    state.equity_curve.append((date, state.value(prices)))
    return state


@dataclass
class BacktestResult:
    initial: float
    equity_curve: list[tuple[str, float]]
    trades: list[Trade]

    @property
    def cr_series(self) -> list[tuple[str, float]]:
        return [(d, (v - self.initial) / self.initial) for d, v in self.equity_curve]

    @property
    def final_cr(self) -> float:
        if not self.equity_curve:
            return 0.0
        return (self.equity_curve[-1][1] - self.initial) / self.initial


def run_backtest(dates, predictions_by_date: dict[str, dict[str, float]],
                 prices_by_date: dict[str, dict[str, float]], k: int,
                 costs: CostModel | None = None,
                 initial: float = INITIAL_CAPITAL) -> BacktestResult:
    """Drive rebalance() over consecutive dates; dates without predictions
    are mark-to-market only."""
    costs = costs or CostModel()
    state = PortfolioState(cash=initial)
    for date in dates:
        prices = prices_by_date[date]
        preds = predictions_by_date.get(date)
        if preds:
            rebalance(state, date, preds, prices, k, costs)
        else:
            for stock, price in prices.items():
                state.last_price[stock] = price
            state.equity_curve.append((date, state.value(prices)))
    return BacktestResult(initial=initial, equity_curve=state.equity_curve,
                          trades=state.trades)


def cumulative_return(result: BacktestResult) -> tuple[list[tuple[str, float]], float]:
    return result.cr_series, result.final_cr


def grid_search_k(final_cr_fn, candidates=K_GRID) -> tuple[int, dict[int, float]]:
    """Pick the candidate with the best final CR; ties go to the smallest k."""
    table = {}
    best_k = None
    for k in sorted(candidates):
        table[k] = final_cr_fn(k)
        if best_k is None or table[k] > table[best_k]:
            best_k = k
    return best_k, table


# ------------------------------------------------------------ file formats


def write_equity_csv(path, result: BacktestResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "value", "cr"])
        for (date, value), (_, cr) in zip(result.equity_curve, result.cr_series):
            w.writerow([date, repr(value), repr(cr)])


def write_trades_csv(path, result: BacktestResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "stock", "side", "shares", "price", "cost"])
        for t in result.trades:
            w.writerow([t.date, t.stock, t.side, repr(t.shares), repr(t.price),
                        repr(t.cost)])


def load_benchmark(path) -> dict[str, float]:
    """Optional index curve for plotting CR against a benchmark."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["date", "index_value"]:
            raise ValueError(f"{path}: bad header {header!r}, expected date,index_value")
        for row in reader:
            if row:
                out[row[0]] = float(row[1])
    return out


# --------------------------------------------------------- model-driven run


def model_predictions(market, params, config, dates) -> dict[str, dict[str, float]]:
    """Score every tradable stock on each date with a frozen model."""
    from .model import forward

    out = {}
    for date in dates:
        batch = market.batch(date, require_label=False)
        trace = forward(params, batch, config)
        out[date] = {sid: float(p) for sid, p in zip(batch.ids, trace.predictions)}
    return out


def market_prices(market, dates) -> dict[str, dict[str, float]]:
    close = market.close
    out = {}
    for date in dates:
        t = market.date_index[date]
        row = close[t]
        out[date] = {market.stocks[i]: float(row[i])
                     for i in np.flatnonzero(~np.isnan(row))}
    return out
