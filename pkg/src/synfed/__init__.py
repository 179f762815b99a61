"""Synthetic-data pretraining followed by federated fine-tuning, at desk scale."""

__version__ = "0.1.0"
