"""OpAmp attention adaptation at desk scale."""

__version__ = "0.1.0"
