"""Region prototypical network for weakly supervised segmentation, desk scale."""

__version__ = "0.1.0"
