"""Geo-distributed PS training: elastic scheduling and WAN sync strategies, simulated."""

__version__ = "0.1.0"
