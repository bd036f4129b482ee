"""Wasserstein-neuron analysis, one-shot Hessian pruning, and cluster-routed
sparse-expert expansion, verified at desk scale on synthetic models."""

__version__ = "0.1.0"
