"""Few-shot common-object localization and weakly-supervised detection with
von Mises-Fisher multiple-instance learning over proposal embeddings."""

__version__ = "0.1.0"
