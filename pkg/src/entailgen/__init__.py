"""Multimodal entailment generation toolkit.

Subpackages: ``numcore`` (autodiff tensor engine), ``corpus`` (data
pipeline), ``models`` (the four encoder-decoder variants), ``decode``
(greedy/beam search), ``metrics`` (multi-reference evaluation),
``analysis`` (overlap analysis), ``evalharness`` (latin-square human
evaluation), ``cli`` (command line driver).
"""

__version__ = "0.1.0"
