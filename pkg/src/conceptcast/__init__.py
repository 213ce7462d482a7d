"""Concept-oriented stock trend forecasting on a from-scratch autodiff core.

The package provides:

* a small reverse-mode autodiff engine (``autodiff``),
* data plumbing for price/concept/cap panels (``data``, ``synthetic``),
* the shared-information model itself (``model``),
* training, evaluation and backtesting (``train``, ``metrics``, ``backtest``),
* hidden-concept inspection (``export``) and a command line (``cli``).
"""

from .autodiff import NumericError, ShapeError, Tensor, backward

__all__ = ["Tensor", "backward", "ShapeError", "NumericError"]
