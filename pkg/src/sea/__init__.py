"""Selective eye-gaze augmentation for imitation learning.

Subpackages and modules:

- ``sea.nn``           tensor core (layers, losses, Adam, gradient oracle)
- ``sea.gaze``         gaze-map geometry, Gaussian targets, percentile mask
- ``sea.data``         trajectory parsing, frame preprocessing, splits
- ``sea.models``       gaze / gating / action networks and the composite pass
- ``sea.training``     decoupled two-phase training and checkpoints
- ``sea.minicatch``    deterministic catch environment with synthetic gaze
- ``sea.evaluation``   rollouts, metrics, reports
- ``sea.stats``        Welch's t-test on a hand-rolled incomplete beta
- ``sea.cli``          the ``sea`` command
"""

__version__ = "0.1.0"
