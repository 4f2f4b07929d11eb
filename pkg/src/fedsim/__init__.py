"""Deterministic federated-learning simulator: FedAvg, greedy update exclusion,
and probabilistic node selection."""

__version__ = "0.1.0"
