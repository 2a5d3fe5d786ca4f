"""Decentralized matrix-factorization recommender with attested raw-data gossip."""

__version__ = "0.1.0"
