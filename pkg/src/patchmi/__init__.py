"""Patch-wise model-inversion attack workbench.

Subpackages cover a minimal float64 autodiff engine, the generator /
patch-discriminator / classifier trio, attack objectives, differentiable
image augmentation, dataset tooling, evaluation metrics, a discrete
divergence-bound verification harness, and a CLI tying them together.
"""

__version__ = "0.1.0"
