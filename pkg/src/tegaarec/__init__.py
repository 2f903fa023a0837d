"""Session-based social recommendation: like-minded peers, transformer encoding, graph attention."""

__version__ = "0.1.0"
