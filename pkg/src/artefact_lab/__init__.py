"""Image-based clustering of archaeological artefacts: coin die studies and
sherd reconstruction from classical features."""

__version__ = "0.1.0"
