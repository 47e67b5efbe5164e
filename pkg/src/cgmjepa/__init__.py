"""Masked latent-prediction pretraining (CGM-JEPA / X-CGM-JEPA) for continuous
glucose monitoring windows, with preprocessing, linear probing and
representation metrics."""

__version__ = "0.1.0"
