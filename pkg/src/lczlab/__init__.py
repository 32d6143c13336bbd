"""Multimodal SAR and multispectral fusion networks for Local Climate Zone classification.

Built on a small numpy reverse-mode autodiff engine.  Submodules:

* ``tensor``, ``ops``, ``nn``, ``optim``: autodiff engine, layers and Adam
* ``data``: patch storage, band grouping, label spaces and synthetic data
* ``preprocess``: multi-scale Gaussian smoothing
* ``models``: the FM1 to FM4 fusion networks and their ablations
* ``training``: training loop, evaluation and late-fusion weight tuning
* ``metrics``: confusion-matrix metrics
* ``cli``: the ``lczlab`` command
"""

from .errors import LczLabError
from .tensor import Parameter, Tape, Tensor

__version__ = "0.1.0"

__all__ = ["LczLabError", "Parameter", "Tape", "Tensor", "__version__"]
