"""SDF-guided novel view synthesis for unstructured photo collections."""

__version__ = "0.1.0"
