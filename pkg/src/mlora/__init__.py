"""Multi-domain CTR prediction with per-domain low-rank adaptors on a frozen backbone."""

__version__ = "0.1.0"
