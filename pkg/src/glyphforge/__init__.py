"""glyphforge: dual-manifold generative font reconstruction.

Learns separate latent manifolds for character shape and font style from a
sparse glyph matrix, scores reconstructions with an adaptive heavy-tail
likelihood over a CDF 9/7 wavelet projection, and reconstructs missing
glyphs of partially observed fonts.
"""

__version__ = "0.1.0"
