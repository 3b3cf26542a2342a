"""Multi-step answer re-ranking with gated cross-candidate evidence and listwise REINFORCE rewards."""

__version__ = "0.1.0"
