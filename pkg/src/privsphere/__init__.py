"""Learning desensitised representations for privacy-preserving release."""

__version__ = "0.1.0"
