"""Liver segmentation and metastasis detection in multi-phase MR volumes.

Two-stage pipeline: a dilated FCN segments the liver from the six contrast
phases, then a dual-pathway FCN (contrast + diffusion inputs) detects lesions
inside the (dilated) liver mask. Includes the full training engine,
post-processing, evaluation metrics, synthetic phantom benchmarks, and a CLI.
"""

__version__ = "0.1.0"
