"""Federated learning simulator with Gaussian-mechanism privacy, a noise-shifting
attacker, and a Q-learning agent that picks the per-round privacy level."""

__version__ = "0.1.0"
