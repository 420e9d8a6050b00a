"""Attribution-guided feature corruption for domain generalization.

Built on a small float64 reverse-mode autodiff engine (:mod:`columbus.tensor`).
"""

__version__ = "0.1.0"
