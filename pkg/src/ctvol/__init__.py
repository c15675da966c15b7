"""CT lung segmentation and infection volumetry."""

__version__ = "0.1.0"
