"""Constraint-aware token pruning for small transformer encoders.

Train a tiny encoder, learn two-tier hard-concrete pruning masks under an
explicit FLOPs budget with ranking distillation from the unpruned teacher,
then run hard token-dropping inference with verified FLOPs accounting.

Subpackages: ``tensor`` (autodiff), ``encoder``, ``scoring``, ``masks``,
``flopsmodel``, ``distill``, ``training``, ``runtime``, ``data``,
``archive``, ``cli``. Kernel backend selection lives in ``backend``.
"""

__version__ = "0.1.0"
