"""Speaker verification toolkit.

Desk-scale, numpy-backed implementation of two time-delay embedding
extractors (a max-pooling stack and a residual stack), angular-margin
softmax training, and cosine / CSML / LDA-PLDA scoring backends with
EER / minDCF evaluation.
"""

__version__ = "0.1.0"
