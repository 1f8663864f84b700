"""Multimodal CNN gait recognition: cuboids, CNN zoo, training, fusion, evaluation."""

__version__ = "0.1.0"
