"""Anomaly detection, explanation and fairness auditing for generator fleets."""

__version__ = "0.1.0"
