"""Desk-scale lifelong person retrieval testbed.

Subpackages:

* :mod:`vladr.autodiff` -- float64 tensors with reverse-mode gradients.
* :mod:`vladr.datasets` -- synthetic domain streams and embedding-file io.
* :mod:`vladr.model` -- backbone, attribute decoder, prompt bank, checkpoints.
* :mod:`vladr.losses` -- retrieval, alignment and distillation objectives.
* :mod:`vladr.training` -- the sequential two-stage training protocol.
* :mod:`vladr.evaluation` -- retrieval metrics, reports and diagnostics.
* :mod:`vladr.config` / :mod:`vladr.cli` -- run configuration and commands.
"""

__version__ = "0.1.0"
