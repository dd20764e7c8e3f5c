"""
binfactor - low-rank binary weight factorization below one bit per weight.

Compresses real-valued weight matrices into two packed sign matrices plus two
scale vectors, runs packed inference on CPU, and accounts storage for binary
quantization formats.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    # Hatch writes the version into the package metadata at build time
    __version__ = version("binfactor")
except PackageNotFoundError:
    __version__ = "0.0.0"
