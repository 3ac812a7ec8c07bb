"""Ex-ante relaxation auctions: magician admission, single-buyer mechanisms and rounding."""

__version__ = "0.1.0"
