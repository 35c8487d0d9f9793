"""Spectral band permutation pretraining (SpecBPP).

Self-supervised pretraining for hyperspectral spectra: a model learns to
recover the original order of shuffled spectral segments, driven by a
two-axis curriculum (segment count, permutation difficulty), then the
encoder is fine-tuned for scalar regression.
"""

__version__ = "0.1.0"
