"""Audio-visual salient object detection for equirectangular panoramic video."""

__version__ = "0.1.0"
