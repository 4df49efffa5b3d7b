"""Streaming seq2seq with monotonic chunkwise attention and latency-reduction training."""

__version__ = "0.1.0"
