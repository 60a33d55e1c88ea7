"""Deterministic desk-scale federated learning benchmark simulator."""
