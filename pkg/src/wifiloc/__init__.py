"""WiFi RSS fingerprint-image localisation with a from-scratch CNN and classic baselines."""

__version__ = "0.1.0"
