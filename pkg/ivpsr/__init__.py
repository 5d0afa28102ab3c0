"""Two-stage instrumental regression for predictive state models."""

__version__ = "1.0.0"
