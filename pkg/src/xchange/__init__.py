"""Cross-chain asset trading with accountable, incrementally settled trades."""

__version__ = "0.1.0"
