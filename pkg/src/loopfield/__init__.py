"""loopfield: looping 3D cinemagraphs from Gaussian-splat point clouds.

Submodules are imported lazily by callers (`from loopfield import
cloud_io`, ...) so that the CLI can cap thread counts before numpy
loads.
"""

__version__ = "0.1.0"
