"""Frame-event spatiotemporal fusion engine.

Event simulation, dual patch-transformer encoders, cross-attention fusion,
self-attention matching, coordinate embedding, and a synthetic
spatiotemporal-grounding benchmark, all on a small numpy autodiff core.
"""

from .errors import StfuseError

__version__ = "0.1.0"
__all__ = ["StfuseError", "__version__"]
