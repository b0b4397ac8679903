"""Streaming listen-attend-spell toolkit: LC-BLSTM listeners, MoChA / adaptive-chunk attention."""

__version__ = "0.1.0"
