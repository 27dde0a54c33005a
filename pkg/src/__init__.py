"""
MARS Detailization Toolkit: Source Package

Multi-LOD shape tokenization with a vector-quantized autoencoder and
next-LOD autoregressive generation of detailed meshes from coarse ones,
on a small numpy reverse-mode autodiff engine.
"""

__version__ = "1.0.0"
__author__ = "MARS Team"
