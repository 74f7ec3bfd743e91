"""Budgeted low-rank compression of linear layers through learned soft thresholds on singular values."""

__version__ = "0.1.0"
