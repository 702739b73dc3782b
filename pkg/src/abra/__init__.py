"""Transport of spectral class residuals between domain experts.

Subpackages: :mod:`abra.linalg` (SVD and orthogonality), :mod:`abra.spectral`
(banded residual adapters), :mod:`abra.transport` (Procrustes alignment and
compositions), :mod:`abra.io` (artifact files), :mod:`abra.bench` (synthetic
benchmark) and :mod:`abra.cli`.
"""

__version__ = "0.1.0"
