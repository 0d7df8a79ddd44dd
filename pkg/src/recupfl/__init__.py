"""Federated-learning simulator with gradient-perturbation defenses, attribute-inference
and reconstruction attacks, and a utility-privacy trade-off harness."""

__version__ = "0.1.0"
