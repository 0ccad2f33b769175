"""Speaker-count estimation from single-channel audio with BLSTM networks."""

__version__ = "0.1.0"
