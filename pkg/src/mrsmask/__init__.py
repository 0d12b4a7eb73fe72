"""Spectral masked-autoencoder pretraining with similarity-driven band masking.

Modules: ``cube`` (scene I/O, patches, synthetic scenes), ``masking`` (mask
plans), ``autonet`` (model and gradients), ``trainer`` (pretrain/fine-tune/
evaluate), ``leakage`` (redundancy and co-mask diagnostics), ``cli``.
"""

__version__ = "0.1.0"
