"""Time semi-discrete incompressible flow on moving domains.

Subpackages: geometry (maps and domain motions), spaces (staggered-grid
operators and norms), rothe_ns / rothe_fsi (the two time-stepping schemes),
diagnostics (the compactness-ingredient checks), cli (command-line front end).
"""

__version__ = "0.1.0"
