"""texqual: texture quality evaluation toolkit.

Synthesizes test charts (dead-leaves and composite), simulates camera
devices as parametric degradation pipelines, measures classical
MTF/acutance scores, and trains a small convolutional patch regressor
with discriminant-region selection, evaluated by rank correlation under
brand-disjoint cross-validation.
"""

__version__ = "0.1.0"
