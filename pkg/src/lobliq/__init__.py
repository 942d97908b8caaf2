"""Limit order book replay and liquidity analytics around large price moves."""

__version__ = "0.1.0"
