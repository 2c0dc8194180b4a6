"""FedLog: federated Bayesian logistic regression on shared sufficient statistics."""

__version__ = "0.1.0"
