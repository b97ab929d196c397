"""Diffusion-based auto-bidding: a masked-completion trajectory generator, a
property aligner, an inverse dynamics decoder and a synthetic auction simulator."""

__version__ = "0.1.0"
