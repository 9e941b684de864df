"""Blind room acoustic parameter estimation at desk scale.

Pipeline stages: shoebox RIR simulation, reverberant-noisy corpus
synthesis, spectrogram augmentation, Gammatone+phase featurization,
gradient-based training of CNN / CRNN / patch-attention regressors,
and metric reporting.
"""

__version__ = "0.1.0"
