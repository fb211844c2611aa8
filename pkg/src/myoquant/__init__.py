"""Muscle/fat quantification on multi-echo T2 data: EPG dictionary fitting,
U-Net muscle-region segmentation and triplet-constrained autoencoder clustering."""

__version__ = "0.1.0"
