"""Variational SimSiam at desk scale: Power Spherical uncertainty on a
non-contrastive self-supervised objective, with a small autodiff engine."""

__version__ = "0.1.0"
