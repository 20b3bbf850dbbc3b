"""Monte-Carlo-augmented group-equivariant convolution engine.

Submodules are imported explicitly (``from mcgconv import affine, basis,
...``); the package root is kept import-light so the CLI can configure
thread environment variables before numpy loads.
"""

__version__ = "0.1.0"
