"""Plug&play BB84 link simulator with LDPC post-processing."""

__version__ = "0.1.0"
