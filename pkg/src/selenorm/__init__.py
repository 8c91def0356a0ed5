"""Deep radiometric normalization for tiled planetary mosaics."""

__version__ = "0.1.0"
