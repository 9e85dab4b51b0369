"""Tensor-network adapters for fine-tuning 3D convolutional diffusion models."""

__version__ = "0.1.0"
