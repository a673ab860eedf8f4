"""Scale-aware spiking encoder-decoder for underwater image enhancement."""

__version__ = "0.1.0"
