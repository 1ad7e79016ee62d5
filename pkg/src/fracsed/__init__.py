"""FracBits mixed-precision search for small sound event detectors, with a
bit-serial NPU simulator and cost model."""
from .kernels import BACKEND

__version__ = "0.1.0"
