"""Character-level pretrained language model and an end-to-end scene text spotter."""

__version__ = "0.1.0"
