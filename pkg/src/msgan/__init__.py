"""Multi-scale gradient GAN for multi-resolution multispectral imagery."""
__version__ = "0.1.0"
