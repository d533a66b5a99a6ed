"""Byzantine fault tolerance lab for distributed SGD.

Implements a gradient-classification filter that screens individual worker
gradients, four Byzantine attack models, the classical robust aggregation
baselines (Krum, Bulyan, coordinate median, trimmed mean), and a
parameter-server simulation harness for convergence and runtime studies.
"""

__version__ = "0.1.0"
