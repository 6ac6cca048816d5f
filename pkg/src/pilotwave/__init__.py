"""Pilot-wave trajectory laboratory.

Spectral wave functions with analytic guidance fields, adaptive trajectory
integration, ensemble relaxation via the coarse-grained H-function, pointer
measurement models, entangled-pair signalling statistics and single field
modes on expanding space.
"""

__version__ = "0.1.0"
