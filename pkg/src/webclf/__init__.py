"""webclf: category names in, continually updated classifiers out.

Given a timestep stream of class names, the pipeline crawls image search
engines, downloads and resizes the hits, embeds them with a frozen backbone,
optionally cleans the pools, and trains iteration-capped incremental
classifier heads with replay, reporting continual-learning metrics.
"""

from .errors import WebclfError

__version__ = "0.1.0"

__all__ = ["WebclfError", "__version__"]
