"""Conditional flow-based full-body pose prior from sparse head-and-hand
observations: coupling-flow likelihoods, a transformer latent-region
approximator, likelihood-guided refinement, and a procedural evaluation
harness."""

__version__ = "0.1.0"
