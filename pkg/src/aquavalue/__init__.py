"""Real-option valuation of fish farms under stochastic feed prices."""

__version__ = "0.1.0"
