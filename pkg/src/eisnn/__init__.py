"""Normalization-free spiking networks built from excitatory-inhibitory circuits."""

__version__ = "0.1.0"
