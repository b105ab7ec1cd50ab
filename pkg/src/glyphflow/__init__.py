"""Layout-planned page-level glyph synthesis with a multi-timestep flow
transformer: corpus generation, training, sampling, editing, inpainting,
reconstruction-error scoring, and an HTTP editing service."""

__version__ = "0.1.0"

from .kernels import USING_NUMBA

__all__ = ["USING_NUMBA", "__version__"]
