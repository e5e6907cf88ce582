"""Deep residual graph-convolution networks on sparse graphs.

Library layout:

* :mod:`smpnn.graph` - CSR graphs, normalization, Dirichlet energy, sampling
* :mod:`smpnn.autodiff` - reverse-mode differentiation and gradient checking
* :mod:`smpnn.model` - block and full-model forward passes, checkpoints
* :mod:`smpnn.training` - Adam, transductive training loops, metrics
* :mod:`smpnn.theory` - injectivity, concentration, and oversmoothing trials
* :mod:`smpnn.benchmark` - FLOP-counted scaling benchmark
* :mod:`smpnn.cli` - command-line entry points and report emission
"""

__version__ = "0.1.0"
