"""
FedCME simulator

Deterministic desk-scale simulation of federated learning with classifier
exchange and feature alignment, plus FedAvg/FedProx/FedRS baselines.
"""

__version__ = "1.0.0"
