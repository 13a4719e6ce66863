"""Semi-supervised text classification toolkit.

Pieces: a data model with regime sampling (``corpus``), synthetic benchmark
corpora (``synth``), a linear hashed n-gram classifier/regressor
(``textmodel``), auxiliary-task data augmentation (``augmentation``),
self-training loops (``selftrain``), and an experiment harness (``harness``).
"""

__version__ = "0.1.0"
