"""Frozen-encoder slice feature export.

Runs a pre-trained image encoder (ResNet-18, ViT-B/16, or a compact
ViT) over per-patient slice image stacks and writes one MMFT feature
file per patient. The MMFT format and the dataset manifest are the only
contract with downstream consumers.
"""

__version__ = "0.1.0"
