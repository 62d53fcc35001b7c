"""Joint camera and static/dynamic radiance-field reconstruction from monocular video."""

__version__ = "0.1.0"
