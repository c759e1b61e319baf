"""Topology-regularized 3D autoencoding with attention-fused
discrete-time survival prediction, evaluation and attribution."""

__version__ = "0.1.0"
