"""Multimodal continual prompt learning with accumulated per-modality prompts.

Modules: ``numerics`` (checked ops, Adam, Gaussian statistics), ``towers``
(frozen two-tower backbone), ``comm`` (the continual learner), ``synth``
(synthetic world and task streams), ``runner`` (training loop and metrics),
``checkpoint`` (tensor containers) and ``cli``.
"""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
