"""Desk-scale laboratory for layer-wise noise stability regularization.

The package couples a small reverse-mode autodiff engine with a toy
transformer encoder whose layer activations can be tapped and perturbed,
plus the regularizers, theory oracles, and diagnostics needed to study how
injected noise propagates through the network and how penalizing that
propagation changes generalization.
"""

__version__ = "0.1.0"
