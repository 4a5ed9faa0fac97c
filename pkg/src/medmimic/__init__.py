"""Multimodal CT/PET/clinical fusion training and evaluation toolkit."""

__version__ = "0.1.0"
