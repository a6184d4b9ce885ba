"""Federated calibration simulator: FedAvg with aggregated order-preserving scalers."""

__version__ = "0.1.0"
