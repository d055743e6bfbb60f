"""Matrix-free finite elements for compressible mantle convection on a 2D annulus."""

__version__ = "0.1.0"
