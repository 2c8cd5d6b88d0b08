"""Collect-and-distribute point cloud transformer toolkit.

Submodules are imported lazily by the CLI so thread-count environment
variables can be set before numpy loads; import them explicitly in library
use (`from cdformer import tensor, geometry, ...`).
"""

__version__ = "0.1.0"
