"""sdd-lab: a desk-scale laboratory for sparse double descent.

Heavy imports live in the submodules so the CLI can cap BLAS threads
before numpy loads.
"""

__version__ = "0.1.0"
