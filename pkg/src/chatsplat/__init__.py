"""Conversational 3D Gaussian feature-field engine.

Renders per-Gaussian language features into view/object/scene token grids
for a pluggable chat backend: tile-based feature compositing, identity-based
mask extraction, a patch tokenizer with learnable scale-shift alignment, and
a two-level L1 distillation trainer over frozen geometry.
"""

__version__ = "0.1.0"
