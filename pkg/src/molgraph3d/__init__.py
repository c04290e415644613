"""Graph convolutional networks over 3D molecular graphs.

A molecule enters as atoms with coordinates, becomes a feature matrix X,
a normalized adjacency A, and a relative-position tensor R, and flows
through convolution layers that exchange information between per-atom
scalar channels and per-atom 3-vector channels.  Training, metrics,
rotation sweeps, and atomic-contribution maps live in their own modules.
"""

from . import analyze, chemper, gcn3d, molio, numcore, train

__all__ = ["analyze", "chemper", "gcn3d", "molio", "numcore", "train"]
__version__ = "0.1.0"
