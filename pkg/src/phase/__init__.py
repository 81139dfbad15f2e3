"""Per-signal LSTM embedders with boosted-tree forecasting of intraoperative events."""

__version__ = "0.1.0"
