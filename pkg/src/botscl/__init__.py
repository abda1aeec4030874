"""Heterophily-aware supervised-contrastive graph encoder for bot detection."""

__version__ = "0.1.0"
