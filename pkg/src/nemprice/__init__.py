"""Regional electricity spot-price modelling: monotone supply regressions with
mixture disturbances, a Gaussian copula VAR layer, density forecasting,
event studies and backtesting."""

__version__ = "0.1.0"
